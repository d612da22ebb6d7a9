//! Conditional-independence graph among the covariates from projection
//! ratios of `ζ̂ = η̂ + Δ̂`, joined with the supports of `Λ̂` and `Θ̂`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cggm::CggmModel;
use crate::data::StandardizeRecord;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, Mat};
use crate::ssanova::{k1, Quadrature, SsAnovaModel, Term};

/// Entries at or below this magnitude count as zero when reading supports.
pub const EDGE_TOL: f64 = 1e-10;

/// Default cut-off on the overall projection ratio.
pub const DEFAULT_CUTOFF: f64 = 0.03;

/// `Ṽ(f, g) = ∫fgρ − ∫fρ ∫gρ` under a quadrature with weights summing to 1.
pub fn tilde_v(f: &[f64], g: &[f64], quad: &Quadrature) -> f64 {
    let w = &quad.weights;
    let (mut fg, mut mf, mut mg) = (0.0, 0.0, 0.0);
    for t in 0..w.len() {
        fg += w[t] * f[t] * g[t];
        mf += w[t] * f[t];
        mg += w[t] * g[t];
    }
    fg - mf * mg
}

/// `ζ̂ = η̂ + Δ̂` with `Δ̂(x) = −½ x_sᵀ M̂ x_s`, where `x_s` is `x` after the
/// standardization used for the conditional model. Values needed by
/// projections are cached on the density's quadrature nodes.
#[derive(Clone, Debug)]
pub struct ZetaModel {
    pub ssanova: SsAnovaModel,
    pub m_hat: Mat,
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    zeta: Vec<f64>,
    /// `log ρ_k(u_k)` on the nodes; empty for uniform `ρ`.
    log_base: Mat,
    linear: Mat,
    /// Per configured term, `θ_v R^v(u_t, z_j)` with nodes in rows.
    term_kernels: Vec<Mat>,
}

pub fn build_zeta(
    ssanova: &SsAnovaModel,
    cggm: &CggmModel,
    standardize: Option<&StandardizeRecord>,
) -> Result<ZetaModel> {
    let d = ssanova.d();
    if cggm.d() != d {
        return Err(Error::DimensionMismatch(format!(
            "density has {d} covariates, conditional model has {}",
            cggm.d()
        )));
    }
    let chol = cholesky(&cggm.lambda).ok_or(Error::NotPositiveDefinite("Λ̂"))?;
    let solved = chol.solve(&cggm.theta.transpose());
    let mut m_hat = &cggm.theta * solved;
    crate::linalg::symmetrize_in_place(&mut m_hat);
    let (x_mean, x_scale) = match standardize {
        Some(r) => {
            if r.x_mean.len() != d {
                return Err(Error::DimensionMismatch("standardization record".into()));
            }
            (r.x_mean.clone(), r.x_scale.clone())
        }
        None => (vec![0.0; d], vec![1.0; d]),
    };
    ZetaModel::new(ssanova.clone(), m_hat, x_mean, x_scale)
}

impl ZetaModel {
    pub fn new(
        ssanova: SsAnovaModel,
        m_hat: Mat,
        x_mean: Vec<f64>,
        x_scale: Vec<f64>,
    ) -> Result<Self> {
        let d = ssanova.d();
        if m_hat.nrows() != d || m_hat.ncols() != d || x_mean.len() != d || x_scale.len() != d {
            return Err(Error::DimensionMismatch("Δ̂ quadratic form".into()));
        }
        let quad = &ssanova.quadrature;
        let t = quad.len();
        let q = ssanova.q();
        let nodes: Vec<Vec<f64>> = (0..t).map(|i| quad.node(i)).collect();
        let reps: Vec<Vec<f64>> = (0..q)
            .map(|j| ssanova.representers.row(j).iter().copied().collect())
            .collect();
        let eta = ssanova.eta_on(quad);
        let mut z = ZetaModel {
            ssanova,
            m_hat,
            x_mean,
            x_scale,
            zeta: Vec::new(),
            log_base: Mat::zeros(0, 0),
            linear: Mat::from_fn(t, d, |i, k| k1(nodes[i][k])),
            term_kernels: Vec::new(),
        };
        z.zeta = nodes
            .iter()
            .zip(&eta)
            .map(|(u, e)| e + z.delta_unit(u))
            .collect();
        if !z.ssanova.base.is_uniform() {
            let base = &z.ssanova.base;
            z.log_base = Mat::from_fn(t, d, |i, k| base.marginal_log(k, nodes[i][k]));
        }
        let terms = z.ssanova.config.terms.clone();
        let theta = z.ssanova.theta.clone();
        z.term_kernels = terms
            .par_iter()
            .zip(theta.par_iter())
            .map(|(term, &w)| Mat::from_fn(t, q, |i, j| w * term.kernel(&nodes[i], &reps[j])))
            .collect();
        Ok(z)
    }

    pub fn d(&self) -> usize {
        self.m_hat.nrows()
    }

    fn standardized(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|k| (x[k] - self.x_mean[k]) / self.x_scale[k])
            .collect()
    }

    fn delta_unit(&self, u: &[f64]) -> f64 {
        self.delta(&self.ssanova.domain.from_unit(u))
    }

    /// `Δ̂(x)` in original coordinates.
    pub fn delta(&self, x: &[f64]) -> f64 {
        let s = self.standardized(x);
        let d = s.len();
        let mut v = 0.0;
        for i in 0..d {
            for j in 0..d {
                v += s[i] * self.m_hat[(i, j)] * s[j];
            }
        }
        -0.5 * v
    }

    /// `ζ̂(x)` in original coordinates.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        Ok(self.ssanova.eval_eta(x)? + self.delta(x))
    }

    /// `ζ̂` on the quadrature nodes.
    pub fn zeta_on_nodes(&self) -> &[f64] {
        &self.zeta
    }

    pub fn quadrature(&self) -> &Quadrature {
        &self.ssanova.quadrature
    }

    /// Every unordered covariate pair `(i, j)`, `i < j`, in lexicographic
    /// order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let d = self.d();
        (0..d)
            .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
            .collect()
    }

    /// `ζ̂ + log ρ` on the quadrature nodes, the log density up to a
    /// constant.
    pub fn target_on_nodes(&self) -> Vec<f64> {
        if self.log_base.ncols() == 0 {
            return self.zeta.clone();
        }
        (0..self.zeta.len())
            .map(|i| self.zeta[i] + self.log_base.row(i).sum())
            .collect()
    }

    /// Basis of `𝒮⁰` on the nodes, one function per column: `k1(u_k)` and
    /// `k1(u_k)²` for every coordinate, `k1(u_k)k1(u_l)` for every included
    /// pair, the representer functions `Σ_{v ∈ 𝒮⁰} θ_v R^v(·, z_j)`, and
    /// `log ρ_k(u_k)` for every coordinate when `ρ` is not uniform.
    pub fn basis(&self, s0: &Subspace) -> Mat {
        let d = self.d();
        let t = self.zeta.len();
        let q = self.ssanova.q();
        let pairs: Vec<(usize, usize)> = s0.pairs.iter().copied().collect();
        let m = 2 * d + pairs.len() + q + self.log_base.ncols();
        let mut b = Mat::zeros(t, m);
        for k in 0..d {
            for i in 0..t {
                let l = self.linear[(i, k)];
                b[(i, k)] = l;
                b[(i, d + k)] = l * l;
            }
        }
        for (c, &(k, l)) in pairs.iter().enumerate() {
            for i in 0..t {
                b[(i, 2 * d + c)] = self.linear[(i, k)] * self.linear[(i, l)];
            }
        }
        let off = 2 * d + pairs.len();
        for (v, term) in self.ssanova.config.terms.iter().enumerate() {
            let keep = match *term {
                Term::Main(_) => true,
                Term::Interaction(k, l) => s0.pairs.contains(&(k, l)),
            };
            if keep {
                let mut block = b.columns_mut(off, q);
                block += &self.term_kernels[v];
            }
        }
        if self.log_base.ncols() > 0 {
            b.columns_mut(off + q, d).copy_from(&self.log_base);
        }
        b
    }
}

/// Interactions admitted to `𝒮⁰`. Main effects and the constant are always
/// in; a pair brings both its `η` interaction (when fitted) and the
/// `x_i x_j` term of `Δ̂`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subspace {
    pub pairs: BTreeSet<(usize, usize)>,
}

impl Subspace {
    pub fn additive() -> Self {
        Subspace::default()
    }

    pub fn with_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Subspace {
            pairs: pairs
                .into_iter()
                .map(|(i, j)| (i.min(j), i.max(j)))
                .collect(),
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        for &(i, j) in &self.pairs {
            if i == j || j >= d {
                return Err(Error::InvalidArgument(format!(
                    "pair ({i}, {j}) is not valid for d = {d}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    /// `Ṽ(ζ̂ + log ρ − ζ̃) / Ṽ(ζ̂ + log ρ − ζ_u)`; zero when the target is constant.
    pub ratio: f64,
    /// Coefficients of `ζ̃` on the centered basis of [`ZetaModel::basis`].
    pub coefficients: Vec<f64>,
    pub residual: f64,
    pub denominator: f64,
    /// The normal equations needed a ridge.
    pub ridged: bool,
}

/// Squared-error projection of the log density `ζ̂ + log ρ` onto `𝒮⁰`
/// under `Ṽ`. The projection `ζ_u` of the uniform density is constant, so
/// the denominator is `Ṽ(ζ̂ + log ρ)`.
pub fn project(zeta: &ZetaModel, s0: &Subspace) -> Result<ProjectionResult> {
    s0.validate(zeta.d())?;
    let quad = zeta.quadrature();
    let w = &quad.weights;
    let t = w.len();
    let mut b = zeta.basis(s0);
    let m = b.ncols();
    for a in 0..m {
        let mean: f64 = (0..t).map(|i| w[i] * b[(i, a)]).sum();
        for i in 0..t {
            b[(i, a)] -= mean;
        }
    }
    let target = zeta.target_on_nodes();
    let zmean: f64 = (0..t).map(|i| w[i] * target[i]).sum();
    let zc: Vec<f64> = target.iter().map(|z| z - zmean).collect();
    let denominator: f64 = (0..t).map(|i| w[i] * zc[i] * zc[i]).sum();

    let mut bw = b.clone();
    for i in 0..t {
        let s = w[i].sqrt();
        for a in 0..m {
            bw[(i, a)] *= s;
        }
    }
    let gram = bw.tr_mul(&bw);
    let zw = Mat::from_fn(t, 1, |i, _| zc[i] * w[i].sqrt());
    let rhs = bw.tr_mul(&zw);
    // Jacobi scaling; columns with no variance under ρ are dropped
    let scale: Vec<f64> = (0..m)
        .map(|a| {
            let g = gram[(a, a)];
            if g > 1e-300 {
                1.0 / g.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let scaled = Mat::from_fn(m, m, |a, c| {
        if a == c && scale[a] == 0.0 {
            1.0
        } else {
            scale[a] * gram[(a, c)] * scale[c]
        }
    });
    let srhs = Mat::from_fn(m, 1, |a, _| scale[a] * rhs[(a, 0)]);
    let (sol, ridged) = match cholesky(&scaled) {
        Some(ch) => (ch.solve(&srhs), false),
        None => {
            let tr = scaled.trace();
            let mut r = scaled.clone();
            let mut out = None;
            for k in 0..8 {
                let ridge = 1e-10 * tr * 10f64.powi(k);
                for a in 0..m {
                    r[(a, a)] = scaled[(a, a)] + ridge;
                }
                if let Some(ch) = cholesky(&r) {
                    out = Some(ch.solve(&srhs));
                    break;
                }
            }
            (
                out.ok_or_else(|| Error::Singular("projection normal equations".into()))?,
                true,
            )
        }
    };
    let coefficients: Vec<f64> = (0..m).map(|a| scale[a] * sol[(a, 0)]).collect();
    let coef = Mat::from_column_slice(m, 1, &coefficients);
    let fitted = &b * coef;
    let residual: f64 = (0..t)
        .map(|i| {
            let e = zc[i] - fitted[(i, 0)];
            w[i] * e * e
        })
        .sum();
    let ratio = if denominator > 0.0 {
        residual / denominator
    } else {
        0.0
    };
    Ok(ProjectionResult {
        ratio,
        coefficients,
        residual,
        denominator,
        ridged,
    })
}

/// `r_{ij}`: the ratio when `𝒮⁰` holds everything except pair `(i, j)`.
/// Symmetric with a zero diagonal.
pub fn pairwise_ratios(zeta: &ZetaModel) -> Result<Mat> {
    let d = zeta.d();
    if d < 2 {
        return Err(Error::InvalidArgument(
            "pairwise ratios need at least two covariates".into(),
        ));
    }
    let pairs = zeta.pairs();
    let ratios: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let s0 = Subspace::with_pairs(pairs.iter().copied().filter(|&p| p != (i, j)));
            project(zeta, &s0)
                .map(|r| r.ratio)
                .map_err(|e| e.with_context(format!("pair ({i}, {j})")))
        })
        .collect();
    let mut out = Mat::zeros(d, d);
    for (&(i, j), r) in pairs.iter().zip(ratios) {
        let r = r?;
        out[(i, j)] = r;
        out[(j, i)] = r;
    }
    Ok(out)
}

/// How the next interaction is chosen during forward selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    /// Order pairs once by `r_{ij}`, largest first.
    #[default]
    Upfront,
    /// At every step add the pair whose inclusion leaves the smallest
    /// residual.
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardSelection {
    /// `Π`: symmetric 0/1 indicator of included interactions.
    pub pi: Vec<Vec<u8>>,
    /// Included pairs in order of inclusion.
    pub order: Vec<(usize, usize)>,
    /// Overall ratio before the first and after every inclusion.
    pub ratios: Vec<f64>,
    #[serde(with = "crate::dense")]
    pub pairwise: Mat,
}

/// Adds interactions to the additive space until the overall ratio is at
/// most `cutoff` or every pair is in. Ties go to the lexicographically
/// first pair.
pub fn forward_select(zeta: &ZetaModel, cutoff: f64, ranking: Ranking) -> Result<ForwardSelection> {
    if !(0.0..1.0).contains(&cutoff) {
        return Err(Error::InvalidArgument(format!(
            "cut-off must lie in [0, 1), got {cutoff}"
        )));
    }
    let d = zeta.d();
    let pairwise = if d >= 2 {
        pairwise_ratios(zeta)?
    } else {
        Mat::zeros(d, d)
    };
    let mut candidates = zeta.pairs();
    if ranking == Ranking::Upfront {
        // stable sort keeps lexicographic order among ties
        candidates.sort_by(|a, b| pairwise[(b.0, b.1)].total_cmp(&pairwise[(a.0, a.1)]));
    }
    let mut s0 = Subspace::additive();
    let mut ratios = vec![project(zeta, &s0)?.ratio];
    let mut order = Vec::new();
    while *ratios.last().unwrap() > cutoff && !candidates.is_empty() {
        let (pos, ratio) = match ranking {
            Ranking::Upfront => {
                let mut next = s0.clone();
                next.pairs.insert(candidates[0]);
                (0, project(zeta, &next)?.ratio)
            }
            Ranking::Greedy => {
                let trial: Vec<Result<f64>> = candidates
                    .par_iter()
                    .map(|&p| {
                        let mut next = s0.clone();
                        next.pairs.insert(p);
                        project(zeta, &next).map(|r| r.ratio)
                    })
                    .collect();
                let mut best = (0, f64::INFINITY);
                for (k, r) in trial.into_iter().enumerate() {
                    let r = r?;
                    if r < best.1 {
                        best = (k, r);
                    }
                }
                best
            }
        };
        let p = candidates.remove(pos);
        s0.pairs.insert(p);
        order.push(p);
        ratios.push(ratio);
    }
    let mut pi = vec![vec![0u8; d]; d];
    for &(i, j) in &s0.pairs {
        pi[i][j] = 1;
        pi[j][i] = 1;
    }
    Ok(ForwardSelection {
        pi,
        order,
        ratios,
        pairwise,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    XX,
    XY,
    YY,
}

impl Block {
    pub fn as_str(&self) -> &'static str {
        match self {
            Block::XX => "XX",
            Block::XY => "XY",
            Block::YY => "YY",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub block: Block,
    /// `r_{ij}` for covariate pairs (NaN if not supplied), `|Θ̂|` or `|Λ̂|`
    /// otherwise.
    pub weight: f64,
}

/// Graph on the `d + p` variables, covariates first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEstimate {
    pub schema_version: u32,
    pub nodes: Vec<String>,
    pub d: usize,
    pub adjacency: Vec<Vec<u8>>,
    pub pi: Vec<Vec<u8>>,
    pub edges: Vec<Edge>,
}

/// Joins `Π` with the off-diagonal support of `Λ̂` and the support of `Θ̂`.
pub fn assemble_graph(
    cggm: &CggmModel,
    pi: &[Vec<u8>],
    pairwise: Option<&Mat>,
    names: Option<Vec<String>>,
) -> Result<GraphEstimate> {
    let (d, p) = (cggm.d(), cggm.p());
    if pi.len() != d || pi.iter().any(|r| r.len() != d) {
        return Err(Error::DimensionMismatch(format!("Π must be {d}x{d}")));
    }
    if let Some(r) = pairwise {
        if r.nrows() != d || r.ncols() != d {
            return Err(Error::DimensionMismatch("pairwise ratio matrix".into()));
        }
    }
    let names = match names {
        Some(n) if n.len() == d + p => n,
        Some(n) => {
            return Err(Error::DimensionMismatch(format!(
                "{} node names for {} variables",
                n.len(),
                d + p
            )))
        }
        None => (0..d)
            .map(|k| format!("x{k}"))
            .chain((0..p).map(|k| format!("y{k}")))
            .collect(),
    };
    let size = d + p;
    let mut adjacency = vec![vec![0u8; size]; size];
    let mut edges = Vec::new();
    let mut pi_sym = vec![vec![0u8; d]; d];
    for i in 0..d {
        for j in i + 1..d {
            if pi[i][j] != 0 || pi[j][i] != 0 {
                pi_sym[i][j] = 1;
                pi_sym[j][i] = 1;
                let weight = pairwise.map(|r| r[(i, j)]).unwrap_or(f64::NAN);
                edges.push(Edge {
                    i,
                    j,
                    block: Block::XX,
                    weight,
                });
            }
        }
    }
    for i in 0..d {
        for k in 0..p {
            let v = cggm.theta[(i, k)].abs();
            if v > EDGE_TOL {
                edges.push(Edge {
                    i,
                    j: d + k,
                    block: Block::XY,
                    weight: v,
                });
            }
        }
    }
    for k in 0..p {
        for l in k + 1..p {
            let v = cggm.lambda[(k, l)].abs().max(cggm.lambda[(l, k)].abs());
            if v > EDGE_TOL {
                edges.push(Edge {
                    i: d + k,
                    j: d + l,
                    block: Block::YY,
                    weight: v,
                });
            }
        }
    }
    for e in &edges {
        adjacency[e.i][e.j] = 1;
        adjacency[e.j][e.i] = 1;
    }
    Ok(GraphEstimate {
        schema_version: 1,
        nodes: names,
        d,
        adjacency,
        pi: pi_sym,
        edges,
    })
}

impl GraphEstimate {
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edge list with header `node_i, node_j, block, weight`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("node_i\tnode_j\tblock\tweight\n");
        for e in &self.edges {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                self.nodes[e.i],
                self.nodes[e.j],
                e.block.as_str(),
                e.weight
            );
        }
        s
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("graph csscgg {\n");
        for (k, name) in self.nodes.iter().enumerate() {
            let shape = if k < self.d { "box" } else { "ellipse" };
            let _ = writeln!(s, "  \"{}\" [shape={shape}];", escape_dot(name));
        }
        for e in &self.edges {
            let style = match e.block {
                Block::XX => "style=dashed, color=red",
                Block::XY => "style=bold, color=blue",
                Block::YY => "style=solid, color=black",
            };
            let _ = writeln!(
                s,
                "  \"{}\" -- \"{}\" [{style}];",
                escape_dot(&self.nodes[e.i]),
                escape_dot(&self.nodes[e.j])
            );
        }
        s.push_str("}\n");
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn escape_dot(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}
