//! Smoothing-spline ANOVA estimate of the covariate density by penalized
//! pseudo-likelihood, with tensor-product cubic spline kernels on the unit
//! cube and a base density on the data box, uniform or a product of
//! marginal kernel estimates.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::linalg::{solve_spd_with_ridge, Mat};

/// Exponents are clamped to `[-EXP_CLAMP, EXP_CLAMP]` before `exp`.
pub const EXP_CLAMP: f64 = 40.0;

/// Scaled Bernoulli polynomials on `[0, 1]`.
pub fn k1(t: f64) -> f64 {
    t - 0.5
}

pub fn k2(t: f64) -> f64 {
    let a = k1(t);
    0.5 * a * a - 1.0 / 24.0
}

pub fn k4(t: f64) -> f64 {
    let a = k1(t);
    let a2 = a * a;
    a2 * a2 / 24.0 - a2 / 48.0 + 7.0 / 5760.0
}

/// Cubic smoothing-spline kernel of the penalized subspace,
/// `k2(x)k2(y) - k4(|x - y|)`.
pub fn cubic_rk(x: f64, y: f64) -> f64 {
    k2(x) * k2(y) - k4((x - y).abs())
}

/// Univariate kernel used for one coordinate of every term:
/// `k1(x)k1(y) + k2(x)k2(y) - k4(|x - y|)`.
pub fn main_kernel(x: f64, y: f64) -> f64 {
    k1(x) * k1(y) + cubic_rk(x, y)
}

/// Axis-aligned box mapped affinely onto `[0, 1]^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch(
                "box bounds differ in length".into(),
            ));
        }
        for (k, (&a, &b)) in lo.iter().zip(&hi).enumerate() {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(Error::InvalidArgument(format!(
                    "box side {k} is [{a}, {b}], need finite lo < hi"
                )));
            }
        }
        Ok(DomainBox { lo, hi })
    }

    /// Data range widened by `margin` times the range on each side.
    pub fn from_data(x: &Mat, margin: f64) -> Result<Self> {
        let d = x.ncols();
        let mut lo = vec![0.0; d];
        let mut hi = vec![0.0; d];
        for k in 0..d {
            let col = x.column(k);
            let (a, b) = (col.min(), col.max());
            let w = b - a;
            if !(w > 0.0) {
                return Err(Error::ConstantColumn(format!("x{k}")));
            }
            lo[k] = a - margin * w;
            hi[k] = b + margin * w;
        }
        DomainBox::new(lo, hi)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn to_unit(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "point has {} coordinates, box has {}",
                x.len(),
                self.dim()
            )));
        }
        let mut u = Vec::with_capacity(x.len());
        for k in 0..x.len() {
            let t = (x[k] - self.lo[k]) / (self.hi[k] - self.lo[k]);
            if !(-1e-12..=1.0 + 1e-12).contains(&t) {
                return Err(Error::InvalidArgument(format!(
                    "coordinate {k} = {} lies outside the domain [{}, {}]",
                    x[k], self.lo[k], self.hi[k]
                )));
            }
            u.push(t.clamp(0.0, 1.0));
        }
        Ok(u)
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(k, &t)| self.lo[k] + t * (self.hi[k] - self.lo[k]))
            .collect()
    }
}

/// One ANOVA component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Main(usize),
    Interaction(usize, usize),
}

impl Term {
    /// Kernel of this term between unit-cube points `u` and `z`.
    pub fn kernel(&self, u: &[f64], z: &[f64]) -> f64 {
        match *self {
            Term::Main(k) => main_kernel(u[k], z[k]),
            Term::Interaction(k, l) => main_kernel(u[k], z[k]) * main_kernel(u[l], z[l]),
        }
    }
}

/// Included ANOVA terms over `d` coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub d: usize,
    pub terms: Vec<Term>,
}

impl KernelConfig {
    pub fn additive(d: usize) -> Self {
        KernelConfig {
            d,
            terms: (0..d).map(Term::Main).collect(),
        }
    }

    /// Main effects and every two-way interaction.
    pub fn two_way(d: usize) -> Self {
        let mut terms: Vec<Term> = (0..d).map(Term::Main).collect();
        for k in 0..d {
            for l in k + 1..d {
                terms.push(Term::Interaction(k, l));
            }
        }
        KernelConfig { d, terms }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.terms {
            if !seen.insert(*t) {
                return Err(Error::InvalidArgument(format!("term {t:?} listed twice")));
            }
            match *t {
                Term::Main(k) if k >= self.d => {
                    return Err(Error::InvalidArgument(format!(
                        "main effect {k} out of range"
                    )))
                }
                Term::Interaction(k, l) => {
                    if !(k < l && l < self.d) {
                        return Err(Error::InvalidArgument(format!(
                            "interaction ({k}, {l}) must satisfy k < l < {}",
                            self.d
                        )));
                    }
                    if !self.terms.contains(&Term::Main(k)) || !self.terms.contains(&Term::Main(l))
                    {
                        return Err(Error::InvalidArgument(format!(
                            "interaction ({k}, {l}) needs both main effects"
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Number of null-space functions: the constant and one linear
    /// function per coordinate.
    pub fn null_dim(&self) -> usize {
        self.d + 1
    }

    /// Null-space basis `[1, k1(u_0), …, k1(u_{d-1})]`.
    pub fn null_basis(&self, u: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.d + 1);
        out.push(1.0);
        out.extend(u.iter().map(|&t| k1(t)));
        out
    }

    /// `Σ_v θ_v R^v(u, z)`.
    pub fn weighted_kernel(&self, theta: &[f64], u: &[f64], z: &[f64]) -> f64 {
        let mut mk = [0.0; 16];
        let per_coord: Vec<f64>;
        let mk: &[f64] = if self.d <= 16 {
            for k in 0..self.d {
                mk[k] = main_kernel(u[k], z[k]);
            }
            &mk[..self.d]
        } else {
            per_coord = (0..self.d).map(|k| main_kernel(u[k], z[k])).collect();
            &per_coord
        };
        self.terms
            .iter()
            .zip(theta)
            .map(|(t, &w)| match *t {
                Term::Main(k) => w * mk[k],
                Term::Interaction(k, l) => w * mk[k] * mk[l],
            })
            .sum()
    }
}

/// Gauss–Legendre nodes and weights on `[0, 1]`, from the eigenvalues of
/// the Jacobi matrix.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    if m == 0 {
        return (vec![], vec![]);
    }
    let mut jac = Mat::zeros(m, m);
    for i in 1..m {
        let k = i as f64;
        let b = k / (4.0 * k * k - 1.0).sqrt();
        jac[(i - 1, i)] = b;
        jac[(i, i - 1)] = b;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (0.5 * (eig.eigenvalues[i] + 1.0), v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // polish each node with Newton steps on P_m
    let mut nodes = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    for (x01, _) in pairs {
        let mut x = 2.0 * x01 - 1.0;
        let mut dp = 1.0;
        for _ in 0..3 {
            let (p, d) = legendre_and_derivative(m, x);
            dp = d;
            x -= p / d;
        }
        let (_, d) = legendre_and_derivative(m, x);
        if d.is_finite() {
            dp = d;
        }
        nodes.push(0.5 * (x + 1.0));
        // weight on [-1, 1] is 2 / ((1 - x²) P'_m(x)²), halved for [0, 1]
        weights.push(1.0 / ((1.0 - x * x) * dp * dp));
    }
    (nodes, weights)
}

fn legendre_and_derivative(m: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if m == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=m {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let mf = m as f64;
    (p1, mf * (x * p1 - p0) / (x * x - 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum QuadratureRule {
    GaussLegendre {
        nodes_per_dim: usize,
    },
    /// Each side split into `panels` equal pieces with `nodes_per_panel`
    /// Gauss–Legendre nodes on each.
    CompositeGaussLegendre {
        panels: usize,
        nodes_per_panel: usize,
    },
    MonteCarlo {
        samples: usize,
        seed: u64,
    },
}

/// Largest one-dimensional Gauss–Legendre rule.
const MAX_RULE_NODES: usize = 2_000;
const MAX_QUADRATURE_NODES: usize = 20_000_000;

/// Nodes on the unit cube with positive weights summing to its volume, 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadrature {
    pub rule: QuadratureRule,
    /// One node per row.
    pub nodes: Mat,
    pub weights: Vec<f64>,
}

impl Quadrature {
    pub fn new(rule: QuadratureRule, d: usize) -> Result<Self> {
        // Tensor rules are capped again in `tensor` once the dimension is known.
        let (per_axis, axis_len) = match rule {
            QuadratureRule::GaussLegendre { nodes_per_dim: m } => (m, Some(m)),
            QuadratureRule::CompositeGaussLegendre {
                panels,
                nodes_per_panel,
            } => (nodes_per_panel, panels.checked_mul(nodes_per_panel)),
            QuadratureRule::MonteCarlo { samples, .. } => (1, samples.checked_mul(d.max(1))),
        };
        if per_axis > MAX_RULE_NODES || !axis_len.is_some_and(|t| t <= MAX_QUADRATURE_NODES) {
            return Err(Error::InvalidArgument(format!(
                "quadrature rule {rule:?} is too large"
            )));
        }
        match rule {
            QuadratureRule::GaussLegendre { nodes_per_dim: m } => {
                let (x, w) = gauss_legendre(m);
                Self::tensor(rule, d, x, w)
            }
            QuadratureRule::CompositeGaussLegendre {
                panels,
                nodes_per_panel,
            } => {
                let (x1, w1) = gauss_legendre(nodes_per_panel);
                let h = 1.0 / panels.max(1) as f64;
                let mut x = Vec::with_capacity(panels * nodes_per_panel);
                let mut w = Vec::with_capacity(panels * nodes_per_panel);
                for p in 0..panels {
                    for (a, b) in x1.iter().zip(&w1) {
                        x.push((p as f64 + a) * h);
                        w.push(b * h);
                    }
                }
                Self::tensor(rule, d, x, w)
            }
            QuadratureRule::MonteCarlo { samples, seed } => {
                if samples == 0 {
                    return Err(Error::InvalidArgument("need at least one sample".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let nodes = Mat::from_fn(samples, d, |_, _| rng.gen::<f64>());
                Ok(Quadrature {
                    rule,
                    nodes,
                    weights: vec![1.0 / samples as f64; samples],
                })
            }
        }
    }

    fn tensor(rule: QuadratureRule, d: usize, x: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        let m = x.len();
        if m == 0 {
            return Err(Error::InvalidArgument("need at least one node".into()));
        }
        let total = m
            .checked_pow(d as u32)
            .filter(|&t| t <= MAX_QUADRATURE_NODES)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("{m}^{d} quadrature nodes is too many"))
            })?;
        let mut nodes = Mat::zeros(total, d);
        let mut weights = vec![1.0; total];
        for t in 0..total {
            let mut rem = t;
            // last coordinate varies fastest
            for k in (0..d).rev() {
                let i = rem % m;
                rem /= m;
                nodes[(t, k)] = x[i];
                weights[t] *= w[i];
            }
        }
        Ok(Quadrature {
            rule,
            nodes,
            weights,
        })
    }

    /// 24 Gauss–Legendre nodes per coordinate up to three coordinates,
    /// otherwise `50·q·d` seeded uniform draws.
    pub fn default_rule(d: usize, q: usize, seed: u64) -> QuadratureRule {
        if d <= 3 {
            QuadratureRule::GaussLegendre { nodes_per_dim: 24 }
        } else {
            QuadratureRule::MonteCarlo {
                samples: 50 * q * d,
                seed,
            }
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, t: usize) -> Vec<f64> {
        self.nodes.row(t).iter().copied().collect()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }
}

/// Default representer count `ceil(10·n^{2/9})`, capped at `n`.
pub fn default_representers(n: usize) -> usize {
    ((10.0 * (n as f64).powf(2.0 / 9.0)).ceil() as usize).min(n)
}

/// Standard normal CDF.
fn phi_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Gaussian kernel density estimate of one coordinate, truncated to
/// `[0, 1]` and renormalized there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kde1d {
    pub bandwidth: f64,
    pub points: Vec<f64>,
    #[serde(skip)]
    log_mass: f64,
}

impl Kde1d {
    /// Bandwidth `0.9·min(sd, IQR/1.34)·n^{-1/5}`.
    pub fn silverman(points: Vec<f64>) -> Result<Self> {
        let n = points.len();
        if n < 2 {
            return Err(Error::InvalidArgument("need at least two points".into()));
        }
        let mean = points.iter().sum::<f64>() / n as f64;
        let sd = (points.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let mut sorted = points.clone();
        sorted.sort_by(f64::total_cmp);
        let quant = |q: f64| {
            let h = q * (n - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        };
        let iqr = quant(0.75) - quant(0.25);
        let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
        let bw = (0.9 * spread * (n as f64).powf(-0.2)).max(1e-3);
        Self::new(bw, points)
    }

    pub fn new(bandwidth: f64, points: Vec<f64>) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) || points.is_empty() {
            return Err(Error::InvalidArgument(
                "kernel estimate needs points and a positive bandwidth".into(),
            ));
        }
        if points.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidData(
                "kernel estimate points must lie in [0, 1]".into(),
            ));
        }
        let mut k = Kde1d {
            bandwidth,
            points,
            log_mass: 0.0,
        };
        let n = k.points.len() as f64;
        let mass: f64 = k
            .points
            .iter()
            .map(|&x| phi_cdf((1.0 - x) / bandwidth) - phi_cdf(-x / bandwidth))
            .sum::<f64>()
            / n;
        k.log_mass = mass.ln();
        Ok(k)
    }

    pub fn log_density(&self, t: f64) -> f64 {
        let h = self.bandwidth;
        let zs: Vec<f64> = self
            .points
            .iter()
            .map(|&x| -0.5 * ((t - x) / h).powi(2))
            .collect();
        let m = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = zs.iter().map(|z| (z - m).exp()).sum();
        m + s.ln() - (self.points.len() as f64).ln() - h.ln() - LOG_SQRT_2PI - self.log_mass
    }

    pub fn cdf(&self, t: f64) -> f64 {
        let h = self.bandwidth;
        let n = self.points.len() as f64;
        let s: f64 = self
            .points
            .iter()
            .map(|&x| phi_cdf((t - x) / h) - phi_cdf(-x / h))
            .sum();
        (s / n / self.log_mass.exp()).clamp(0.0, 1.0)
    }

    /// Inverse CDF by bisection.
    pub fn quantile(&self, s: f64) -> f64 {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid) < s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Base density `ρ` on the unit cube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BaseDensity {
    Uniform,
    /// Product of truncated kernel estimates of the coordinates.
    MarginalKde {
        marginals: Vec<Kde1d>,
    },
}

/// Which base density a fit builds from its data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    Uniform,
    #[default]
    MarginalKde,
}

impl BaseDensity {
    pub fn from_units(kind: BaseKind, units: &[Vec<f64>], d: usize) -> Result<Self> {
        match kind {
            BaseKind::Uniform => Ok(BaseDensity::Uniform),
            BaseKind::MarginalKde => {
                let marginals = (0..d)
                    .map(|k| Kde1d::silverman(units.iter().map(|u| u[k]).collect()))
                    .collect::<Result<Vec<_>>>()?;
                Ok(BaseDensity::MarginalKde { marginals })
            }
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self, BaseDensity::Uniform)
    }

    /// Rebuilds cached normalizers after deserialization.
    fn refreshed(self) -> Result<Self> {
        match self {
            BaseDensity::Uniform => Ok(BaseDensity::Uniform),
            BaseDensity::MarginalKde { marginals } => Ok(BaseDensity::MarginalKde {
                marginals: marginals
                    .into_iter()
                    .map(|k| Kde1d::new(k.bandwidth, k.points))
                    .collect::<Result<Vec<_>>>()?,
            }),
        }
    }

    /// `log ρ_k(t)` of one coordinate.
    pub fn marginal_log(&self, k: usize, t: f64) -> f64 {
        match self {
            BaseDensity::Uniform => 0.0,
            BaseDensity::MarginalKde { marginals } => marginals[k].log_density(t),
        }
    }

    pub fn log_density(&self, u: &[f64]) -> f64 {
        match self {
            BaseDensity::Uniform => 0.0,
            BaseDensity::MarginalKde { marginals } => marginals
                .iter()
                .zip(u)
                .map(|(m, &t)| m.log_density(t))
                .sum(),
        }
    }

    /// Quadrature for integrals against `ρ`: nodes of `rule` on the unit
    /// cube pushed through the marginal quantile functions.
    pub fn quadrature(&self, rule: QuadratureRule, d: usize) -> Result<Quadrature> {
        let mut q = Quadrature::new(rule, d)?;
        if let BaseDensity::MarginalKde { marginals } = self {
            if marginals.len() != d {
                return Err(Error::DimensionMismatch("base density dimension".into()));
            }
            for k in 0..d {
                let mut cache: std::collections::HashMap<u64, f64> = Default::default();
                for t in 0..q.len() {
                    let s = q.nodes[(t, k)];
                    let v = *cache
                        .entry(s.to_bits())
                        .or_insert_with(|| marginals[k].quantile(s));
                    q.nodes[(t, k)] = v;
                }
            }
        }
        Ok(q)
    }
}

/// Held-out score minimized when choosing `λ1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvScore {
    /// `-mean log f̂(X_i)` over held-out rows.
    #[default]
    LogLikelihood,
    /// `mean e^{-η̂(X_i)}` over held-out rows plus `∫η̂ρ`.
    PseudoRisk,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsAnovaOptions {
    /// Representer count; `None` uses [`default_representers`].
    pub representers: Option<usize>,
    pub seed: u64,
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Fraction of the data range added on each side of the box.
    pub box_margin: f64,
    /// `None` uses [`Quadrature::default_rule`].
    pub quadrature: Option<QuadratureRule>,
    pub config: Option<KernelConfig>,
    pub base: BaseKind,
    /// Refit once with term weights set from the first fit's term norms.
    pub rescale_theta: bool,
    pub folds: usize,
    pub cv_score: CvScore,
}

impl Default for SsAnovaOptions {
    fn default() -> Self {
        SsAnovaOptions {
            representers: None,
            seed: 0,
            max_iter: 50,
            grad_tol: 1e-6,
            box_margin: 0.05,
            quadrature: None,
            config: None,
            base: BaseKind::default(),
            rescale_theta: false,
            folds: 5,
            cv_score: CvScore::default(),
        }
    }
}

/// Fitted density `f̂ ∝ e^{η̂}ρ` with `η̂ = φᵀd + ξᵀc` on the unit cube of a
/// box.
#[derive(Clone, Debug, PartialEq)]
pub struct SsAnovaModel {
    pub domain: DomainBox,
    pub config: KernelConfig,
    pub base: BaseDensity,
    /// Representer points in unit coordinates, one per row.
    pub representers: Mat,
    pub d_coef: Vec<f64>,
    pub c_coef: Vec<f64>,
    pub theta: Vec<f64>,
    pub lambda1: f64,
    /// Integrates against `ρ`.
    pub quadrature: Quadrature,
    /// `log ∫ e^{η̂} ρ` under the quadrature.
    pub log_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    /// An exponent hit the clamp during fitting.
    pub clamped: bool,
    pub objective_trace: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SsAnovaModelRepr {
    schema_version: u32,
    domain: DomainBox,
    config: KernelConfig,
    base: BaseDensity,
    representers: Vec<Vec<f64>>,
    d_coef: Vec<f64>,
    c_coef: Vec<f64>,
    theta: Vec<f64>,
    lambda1: f64,
    quadrature: QuadratureRule,
    log_norm: f64,
    converged: bool,
    iterations: usize,
    clamped: bool,
    objective_trace: Vec<f64>,
}

impl Serialize for SsAnovaModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SsAnovaModelRepr {
            schema_version: 1,
            domain: self.domain.clone(),
            config: self.config.clone(),
            base: self.base.clone(),
            representers: (0..self.representers.nrows())
                .map(|i| self.representers.row(i).iter().copied().collect())
                .collect(),
            d_coef: self.d_coef.clone(),
            c_coef: self.c_coef.clone(),
            theta: self.theta.clone(),
            lambda1: self.lambda1,
            quadrature: self.quadrature.rule.clone(),
            log_norm: self.log_norm,
            converged: self.converged,
            iterations: self.iterations,
            clamped: self.clamped,
            objective_trace: self.objective_trace.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SsAnovaModel {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = SsAnovaModelRepr::deserialize(de)?;
        SsAnovaModel::from_repr(r).map_err(D::Error::custom)
    }
}

impl SsAnovaModel {
    fn from_repr(r: SsAnovaModelRepr) -> Result<Self> {
        let d = r.config.d;
        r.config.validate()?;
        if r.domain.dim() != d {
            return Err(Error::DimensionMismatch(
                "box and kernel dimensions differ".into(),
            ));
        }
        DomainBox::new(r.domain.lo.clone(), r.domain.hi.clone())?;
        let q = r.representers.len();
        if r.c_coef.len() != q || r.d_coef.len() != d + 1 || r.theta.len() != r.config.terms.len() {
            return Err(Error::DimensionMismatch(
                "coefficient lengths do not match".into(),
            ));
        }
        let mut rep = Mat::zeros(q, d);
        for (i, row) in r.representers.iter().enumerate() {
            if row.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "representer {i} has wrong length"
                )));
            }
            for (k, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidData(format!(
                        "representer {i} lies outside the unit cube"
                    )));
                }
                rep[(i, k)] = v;
            }
        }
        let finite = r
            .d_coef
            .iter()
            .chain(&r.c_coef)
            .chain(&r.theta)
            .all(|v| v.is_finite())
            && r.lambda1.is_finite()
            && r.log_norm.is_finite();
        if !finite {
            return Err(Error::InvalidData("non-finite coefficient".into()));
        }
        let base = r.base.refreshed()?;
        if let BaseDensity::MarginalKde { marginals } = &base {
            if marginals.len() != d {
                return Err(Error::DimensionMismatch("base density dimension".into()));
            }
        }
        let quadrature = base.quadrature(r.quadrature, d)?;
        Ok(SsAnovaModel {
            domain: r.domain,
            config: r.config,
            base,
            representers: rep,
            d_coef: r.d_coef,
            c_coef: r.c_coef,
            theta: r.theta,
            lambda1: r.lambda1,
            quadrature,
            log_norm: r.log_norm,
            converged: r.converged,
            iterations: r.iterations,
            clamped: r.clamped,
            objective_trace: r.objective_trace,
        })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn q(&self) -> usize {
        self.representers.nrows()
    }

    fn representer(&self, j: usize) -> Vec<f64> {
        self.representers.row(j).iter().copied().collect()
    }

    /// `η̂` at a unit-cube point.
    pub fn eta_unit(&self, u: &[f64]) -> f64 {
        let phi = self.config.null_basis(u);
        let mut v: f64 = phi.iter().zip(&self.d_coef).map(|(a, b)| a * b).sum();
        for j in 0..self.q() {
            let z = self.representer(j);
            v += self.c_coef[j] * self.config.weighted_kernel(&self.theta, u, &z);
        }
        v
    }

    /// Contribution of one term to `η̂` at a unit-cube point, excluding the
    /// null-space part.
    pub fn term_value_unit(&self, term_index: usize, u: &[f64]) -> f64 {
        let t = self.config.terms[term_index];
        let w = self.theta[term_index];
        (0..self.q())
            .map(|j| self.c_coef[j] * w * t.kernel(u, &self.representer(j)))
            .sum()
    }

    /// `η̂` at a point of the original coordinates.
    pub fn eval_eta(&self, x: &[f64]) -> Result<f64> {
        Ok(self.eta_unit(&self.domain.to_unit(x)?))
    }

    /// Log density with respect to the uniform measure on the unit cube.
    pub fn log_unit_density(&self, u: &[f64]) -> f64 {
        self.eta_unit(u) + self.base.log_density(u) - self.log_norm
    }

    /// Log density with respect to Lebesgue measure on the box.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let u = self.domain.to_unit(x)?;
        Ok(self.log_unit_density(&u) - self.domain.volume().ln())
    }

    pub fn eval_density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density(x)?.exp())
    }

    /// `η̂` at every node of a quadrature, computed in parallel.
    pub fn eta_on(&self, quad: &Quadrature) -> Vec<f64> {
        (0..quad.len())
            .into_par_iter()
            .map(|t| self.eta_unit(&quad.node(t)))
            .collect()
    }

    /// `∫ f̂` over the box under the fit quadrature; 1 up to rounding.
    pub fn total_mass(&self) -> f64 {
        let eta = self.eta_on(&self.quadrature);
        let vals: Vec<f64> = eta.iter().map(|e| (e - self.log_norm).exp()).collect();
        self.quadrature.integrate(&vals)
    }

    /// `E_f̂[x xᵀ]` in the original coordinates under the fit quadrature.
    pub fn second_moment(&self) -> Mat {
        let d = self.d();
        let eta = self.eta_on(&self.quadrature);
        let mut m = Mat::zeros(d, d);
        for (t, e) in eta.iter().enumerate() {
            let w = self.quadrature.weights[t] * (e - self.log_norm).exp();
            let x = self.domain.from_unit(&self.quadrature.node(t));
            for i in 0..d {
                for j in 0..d {
                    m[(i, j)] += w * x[i] * x[j];
                }
            }
        }
        m
    }

    /// `J(η̂) = cᵀQc`.
    pub fn roughness(&self) -> f64 {
        let q = self.q();
        let mut s = 0.0;
        for i in 0..q {
            let zi = self.representer(i);
            for j in 0..q {
                let zj = self.representer(j);
                s += self.c_coef[i]
                    * self.c_coef[j]
                    * self.config.weighted_kernel(&self.theta, &zi, &zj);
            }
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `log Σ_t w_t e^{η_t}`.
pub fn log_integral_exp(quad: &Quadrature, eta: &[f64]) -> f64 {
    let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = eta
        .iter()
        .zip(&quad.weights)
        .map(|(e, w)| w * (e - m).exp())
        .sum();
    m + s.ln()
}

/// Penalized pseudo-likelihood `(1/n)Σ e^{-η(X_i)} + ∫ηρ + (λ1/2)cᵀQc` in
/// the coefficients `b = (d, c)`. Under uniform `ρ` every kernel integrates
/// to zero in each argument, so `∫ηρ` is the constant coefficient;
/// otherwise it is `gᵀb` with `g` integrated by quadrature.
#[derive(Clone, Debug)]
pub struct PseudoLikelihood {
    /// Row `i` holds `(φ(X_i), ξ(X_i))`.
    pub design: Mat,
    /// Representer Gram matrix `Q`.
    pub gram: Mat,
    /// `∫ (φ, ξ) ρ`.
    pub integral: Vec<f64>,
    pub null_dim: usize,
    pub lambda1: f64,
}

#[derive(Clone, Debug)]
pub struct PseudoEval {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: Mat,
    pub clamped: bool,
}

fn basis_row(config: &KernelConfig, theta: &[f64], reps: &[Vec<f64>], u: &[f64], out: &mut [f64]) {
    let m = config.null_dim();
    for (k, v) in config.null_basis(u).into_iter().enumerate() {
        out[k] = v;
    }
    for (j, z) in reps.iter().enumerate() {
        out[m + j] = config.weighted_kernel(theta, u, z);
    }
}

impl PseudoLikelihood {
    /// Uniform `ρ`.
    pub fn new(
        config: &KernelConfig,
        theta: &[f64],
        units: &[Vec<f64>],
        representers: &Mat,
        lambda1: f64,
    ) -> Self {
        let q = representers.nrows();
        let reps: Vec<Vec<f64>> = (0..q)
            .map(|j| representers.row(j).iter().copied().collect())
            .collect();
        let m = config.null_dim();
        let n = units.len();
        let mut design = Mat::zeros(n, m + q);
        let mut row = vec![0.0; m + q];
        for (i, u) in units.iter().enumerate() {
            basis_row(config, theta, &reps, u, &mut row);
            for (k, v) in row.iter().enumerate() {
                design[(i, k)] = *v;
            }
        }
        let gram = Mat::from_fn(q, q, |i, j| {
            config.weighted_kernel(theta, &reps[i], &reps[j])
        });
        let mut integral = vec![0.0; m + q];
        integral[0] = 1.0;
        PseudoLikelihood {
            design,
            gram,
            integral,
            null_dim: m,
            lambda1,
        }
    }

    /// General `ρ`, integrated by a quadrature against it.
    pub fn with_base(
        config: &KernelConfig,
        theta: &[f64],
        units: &[Vec<f64>],
        representers: &Mat,
        lambda1: f64,
        base: &BaseDensity,
        quad: &Quadrature,
    ) -> Self {
        let mut pl = Self::new(config, theta, units, representers, lambda1);
        if !base.is_uniform() {
            let q = representers.nrows();
            let reps: Vec<Vec<f64>> = (0..q)
                .map(|j| representers.row(j).iter().copied().collect())
                .collect();
            let dim = pl.dim();
            pl.integral = (0..quad.len())
                .into_par_iter()
                .fold(
                    || (vec![0.0; dim], vec![0.0; dim]),
                    |(mut acc, mut row), t| {
                        basis_row(config, theta, &reps, &quad.node(t), &mut row);
                        for k in 0..dim {
                            acc[k] += quad.weights[t] * row[k];
                        }
                        (acc, row)
                    },
                )
                .map(|(acc, _)| acc)
                .reduce(
                    || vec![0.0; dim],
                    |mut a, b| {
                        for k in 0..dim {
                            a[k] += b[k];
                        }
                        a
                    },
                );
        }
        pl
    }

    pub fn dim(&self) -> usize {
        self.design.ncols()
    }

    fn eta(&self, b: &[f64]) -> Vec<f64> {
        let bv = Mat::from_column_slice(b.len(), 1, b);
        (&self.design * bv).column(0).iter().copied().collect()
    }

    fn penalty(&self, b: &[f64]) -> f64 {
        let m = self.null_dim;
        let c = Mat::from_column_slice(b.len() - m, 1, &b[m..]);
        0.5 * self.lambda1 * (c.transpose() * &self.gram * &c)[(0, 0)]
    }

    fn linear(&self, b: &[f64]) -> f64 {
        self.integral.iter().zip(b).map(|(g, v)| g * v).sum()
    }

    pub fn value(&self, b: &[f64]) -> f64 {
        let n = self.design.nrows() as f64;
        let s: f64 = self
            .eta(b)
            .iter()
            .map(|&e| (-e).clamp(-EXP_CLAMP, EXP_CLAMP).exp())
            .sum();
        s / n + self.linear(b) + self.penalty(b)
    }

    pub fn evaluate(&self, b: &[f64]) -> PseudoEval {
        let n = self.design.nrows();
        let nf = n as f64;
        let dim = self.dim();
        let m = self.null_dim;
        let eta = self.eta(b);
        let mut clamped = false;
        let w: Vec<f64> = eta
            .iter()
            .map(|&e| {
                if (-e).abs() > EXP_CLAMP {
                    clamped = true;
                }
                (-e).clamp(-EXP_CLAMP, EXP_CLAMP).exp()
            })
            .collect();
        let mut grad = self.integral.clone();
        for i in 0..n {
            for k in 0..dim {
                grad[k] -= w[i] * self.design[(i, k)] / nf;
            }
        }
        let q = dim - m;
        let c = Mat::from_column_slice(q, 1, &b[m..]);
        let qc = &self.gram * &c;
        for j in 0..q {
            grad[m + j] += self.lambda1 * qc[(j, 0)];
        }
        let mut scaled = self.design.clone();
        for i in 0..n {
            let s = (w[i] / nf).sqrt();
            for k in 0..dim {
                scaled[(i, k)] *= s;
            }
        }
        let mut hess = scaled.tr_mul(&scaled);
        for i in 0..q {
            for j in 0..q {
                hess[(m + i, m + j)] += self.lambda1 * self.gram[(i, j)];
            }
        }
        crate::linalg::symmetrize_in_place(&mut hess);
        let value = w.iter().sum::<f64>() / nf + self.linear(b) + self.penalty(b);
        PseudoEval {
            value,
            gradient: grad,
            hessian: hess,
            clamped,
        }
    }
}

/// Basis rows `(φ, ξ)` at a set of unit-cube points.
fn basis_rows(config: &KernelConfig, theta: &[f64], reps: &Mat, units: &[Vec<f64>]) -> Mat {
    let q = reps.nrows();
    let reps: Vec<Vec<f64>> = (0..q)
        .map(|j| reps.row(j).iter().copied().collect())
        .collect();
    let dim = config.null_dim() + q;
    let rows: Vec<Vec<f64>> = units
        .par_iter()
        .map(|u| {
            let mut row = vec![0.0; dim];
            basis_row(config, theta, &reps, u, &mut row);
            row
        })
        .collect();
    Mat::from_fn(rows.len(), dim, |i, k| rows[i][k])
}

struct NewtonFit {
    coef: Vec<f64>,
    converged: bool,
    iterations: usize,
    clamped: bool,
    trace: Vec<f64>,
}

fn newton(pl: &PseudoLikelihood, max_iter: usize, grad_tol: f64) -> Result<NewtonFit> {
    let dim = pl.dim();
    let mut b = vec![0.0; dim];
    let mut cur = pl.evaluate(&b);
    let mut trace = vec![cur.value];
    let mut clamped = cur.clamped;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..max_iter {
        let gnorm = cur.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < grad_tol {
            converged = true;
            break;
        }
        iterations = it + 1;
        let g = Mat::from_column_slice(dim, 1, &cur.gradient);
        let (step, _) = solve_spd_with_ridge(&cur.hessian, &(-g), 1e-12)?;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = (0..dim).map(|k| b[k] + alpha * step[(k, 0)]).collect();
            let v = pl.value(&trial);
            if v.is_finite() && v <= cur.value {
                accepted = Some(trial);
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some(nb) => {
                let prev = cur.value;
                b = nb;
                cur = pl.evaluate(&b);
                clamped |= cur.clamped;
                trace.push(cur.value);
                if (prev - cur.value).abs() <= 1e-15 * prev.abs().max(1.0) {
                    // no further progress representable in double precision
                    let gnorm = cur.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
                    converged = gnorm < grad_tol.sqrt();
                    break;
                }
            }
            None => break,
        }
    }
    if !converged {
        let gnorm = cur.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
        converged = gnorm < grad_tol;
    }
    Ok(NewtonFit {
        coef: b,
        converged,
        iterations,
        clamped,
        trace,
    })
}

fn rows_to_units(x: &Mat, domain: &DomainBox) -> Result<Vec<Vec<f64>>> {
    (0..x.nrows())
        .map(|i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            domain.to_unit(&row)
        })
        .collect()
}

fn check_inputs(x: &Mat, opts: &SsAnovaOptions) -> Result<KernelConfig> {
    let (n, d) = (x.nrows(), x.ncols());
    if d == 0 {
        return Err(Error::InvalidArgument("no covariates to model".into()));
    }
    if n < 10 {
        return Err(Error::InvalidArgument(format!(
            "density estimation needs at least 10 rows, got {n}"
        )));
    }
    let config = opts
        .config
        .clone()
        .unwrap_or_else(|| KernelConfig::two_way(d));
    if config.d != d {
        return Err(Error::DimensionMismatch(
            "kernel configuration dimension".into(),
        ));
    }
    config.validate()?;
    Ok(config)
}

fn pick_representers(units: &[Vec<f64>], opts: &SsAnovaOptions) -> Mat {
    let n = units.len();
    let d = units[0].len();
    let q = opts
        .representers
        .unwrap_or_else(|| default_representers(n))
        .clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut picked = sample(&mut rng, n, q).into_vec();
    picked.sort_unstable();
    Mat::from_fn(q, d, |j, k| units[picked[j]][k])
}

fn check_lambda(lambda1: f64) -> Result<()> {
    if !(lambda1.is_finite() && lambda1 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "λ1 must be positive, got {lambda1}"
        )));
    }
    Ok(())
}

/// Fits `η̂` on the rows of `x` for a fixed `λ1`. `domain` defaults to the
/// data range widened by `opts.box_margin`; `ρ` is built from the rows of
/// `x` as `opts.base` says.
pub fn fit_logistic_density(
    x: &Mat,
    lambda1: f64,
    theta: Option<Vec<f64>>,
    domain: Option<DomainBox>,
    opts: &SsAnovaOptions,
) -> Result<SsAnovaModel> {
    let config = check_inputs(x, opts)?;
    check_lambda(lambda1)?;
    let d = x.ncols();
    let domain = match domain {
        Some(b) => b,
        None => DomainBox::from_data(x, opts.box_margin)?,
    };
    let units = rows_to_units(x, &domain)?;
    let base = BaseDensity::from_units(opts.base, &units, d)?;
    let representers = pick_representers(&units, opts);
    let q = representers.nrows();
    let theta = theta.unwrap_or_else(|| vec![1.0; config.terms.len()]);
    if theta.len() != config.terms.len() || theta.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::InvalidArgument(
            "term weights must be positive, one per term".into(),
        ));
    }
    let rule = opts
        .quadrature
        .clone()
        .unwrap_or_else(|| Quadrature::default_rule(d, q, opts.seed));
    let quadrature = base.quadrature(rule, d)?;

    let run = |theta: &[f64]| -> Result<NewtonFit> {
        let pl = PseudoLikelihood::with_base(
            &config,
            theta,
            &units,
            &representers,
            lambda1,
            &base,
            &quadrature,
        );
        newton(&pl, opts.max_iter, opts.grad_tol)
    };
    let mut theta = theta;
    let mut fit = run(&theta)?;
    if opts.rescale_theta && config.terms.len() > 1 {
        theta = rescaled_theta(
            &config,
            &theta,
            &representers,
            &fit.coef[config.null_dim()..],
        );
        fit = run(&theta)?;
    }

    let m = config.null_dim();
    let mut model = SsAnovaModel {
        domain,
        config,
        base,
        representers,
        d_coef: fit.coef[..m].to_vec(),
        c_coef: fit.coef[m..].to_vec(),
        theta,
        lambda1,
        quadrature,
        log_norm: 0.0,
        converged: fit.converged,
        iterations: fit.iterations,
        clamped: fit.clamped,
        objective_trace: fit.trace,
    };
    let eta = model.eta_on(&model.quadrature);
    model.log_norm = log_integral_exp(&model.quadrature, &eta);
    if !model.converged {
        log::warn!(
            "density fit at λ1 = {lambda1} stopped after {} Newton steps without reaching the gradient tolerance",
            model.iterations
        );
    }
    Ok(model)
}

/// Term weights proportional to `θ_v² cᵀQ_v c`, normalized to mean one.
fn rescaled_theta(config: &KernelConfig, theta: &[f64], reps: &Mat, c: &[f64]) -> Vec<f64> {
    let q = reps.nrows();
    let rows: Vec<Vec<f64>> = (0..q)
        .map(|j| reps.row(j).iter().copied().collect())
        .collect();
    let mut norms: Vec<f64> = config
        .terms
        .iter()
        .zip(theta)
        .map(|(t, &w)| {
            let mut s = 0.0;
            for i in 0..q {
                for j in 0..q {
                    s += c[i] * c[j] * t.kernel(&rows[i], &rows[j]);
                }
            }
            (w * w * s).max(0.0)
        })
        .collect();
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    if !(mean > 0.0) {
        return theta.to_vec();
    }
    for v in &mut norms {
        *v = (*v / mean).max(1e-8);
    }
    norms
}

/// Cross-validated pseudo-likelihood risk over a `λ1` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambda1Selection {
    pub grid: Vec<f64>,
    pub scores: Vec<f64>,
    pub chosen: f64,
}

/// Default `λ1` grid: 15 values from `1e-7` to `1`, evenly spaced on the
/// log scale.
pub fn default_lambda1_grid() -> Vec<f64> {
    (0..15).map(|i| 10f64.powf(-7.0 + 0.5 * i as f64)).collect()
}

struct FoldProblem {
    pl: PseudoLikelihood,
    held_rows: Mat,
    held_log_base: f64,
    node_rows: Mat,
    quad: Quadrature,
}

impl FoldProblem {
    /// `-Σ_{i ∈ fold} log f̂(X_i)` on the unit cube.
    fn held_out_loss(&self, b: &[f64]) -> f64 {
        let bv = Mat::from_column_slice(b.len(), 1, b);
        let held: f64 = (&self.held_rows * &bv).iter().sum();
        let nodes: Vec<f64> = (&self.node_rows * &bv).iter().copied().collect();
        let log_norm = log_integral_exp(&self.quad, &nodes);
        -(held + self.held_log_base) + self.held_rows.nrows() as f64 * log_norm
    }

    /// `Σ_{i ∈ fold} e^{-η(X_i)} + |fold|·∫ηρ`.
    fn held_out_risk(&self, b: &[f64]) -> f64 {
        let bv = Mat::from_column_slice(b.len(), 1, b);
        let s: f64 = (&self.held_rows * &bv)
            .iter()
            .map(|&e| (-e).clamp(-EXP_CLAMP, EXP_CLAMP).exp())
            .sum();
        let linear: f64 = self.pl.integral.iter().zip(b).map(|(g, v)| g * v).sum();
        s + self.held_rows.nrows() as f64 * linear
    }
}

/// Chooses `λ1` by k-fold cross-validation of `opts.cv_score`, by default
/// the held-out negative log-likelihood `-(1/n)Σ_i log f̂_{-k(i)}(X_i)`. The
/// pseudo-likelihood risk is cheaper but its `∫η̂ρ` term is only as good as
/// the quadrature, which rough fits under a peaked `ρ` defeat. All folds share one box
/// and one `ρ`, both built from all rows; ties go to the larger `λ1`.
pub fn select_lambda1(
    x: &Mat,
    grid: &[f64],
    domain: Option<DomainBox>,
    opts: &SsAnovaOptions,
) -> Result<Lambda1Selection> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty λ1 grid".into()));
    }
    for &g in grid {
        check_lambda(g)?;
    }
    let config = check_inputs(x, opts)?;
    let (n, d) = (x.nrows(), x.ncols());
    let domain = match domain {
        Some(b) => b,
        None => DomainBox::from_data(x, opts.box_margin)?,
    };
    if grid.len() == 1 {
        return Ok(Lambda1Selection {
            grid: grid.to_vec(),
            scores: vec![f64::NAN],
            chosen: grid[0],
        });
    }
    let units = rows_to_units(x, &domain)?;
    let base = BaseDensity::from_units(opts.base, &units, d)?;
    let folds = crate::tuning::fold_assignment(n, opts.folds, opts.seed)?;
    let theta = vec![1.0; config.terms.len()];

    // everything that does not depend on λ1 is built once per fold
    let problems: Vec<FoldProblem> = folds
        .iter()
        .map(|held| {
            let mut mask = vec![false; n];
            for &i in held {
                mask[i] = true;
            }
            let train: Vec<Vec<f64>> = (0..n)
                .filter(|&i| !mask[i])
                .map(|i| units[i].clone())
                .collect();
            let reps = pick_representers(&train, opts);
            let rule = opts
                .quadrature
                .clone()
                .unwrap_or_else(|| Quadrature::default_rule(d, reps.nrows(), opts.seed));
            let quad = base.quadrature(rule, d)?;
            let pl = PseudoLikelihood::with_base(&config, &theta, &train, &reps, 1.0, &base, &quad);
            let held_units: Vec<Vec<f64>> = held.iter().map(|&i| units[i].clone()).collect();
            let held_log_base = held_units.iter().map(|u| base.log_density(u)).sum();
            let nodes: Vec<Vec<f64>> = (0..quad.len()).map(|t| quad.node(t)).collect();
            Ok(FoldProblem {
                held_rows: basis_rows(&config, &theta, &reps, &held_units),
                node_rows: basis_rows(&config, &theta, &reps, &nodes),
                pl,
                held_log_base,
                quad,
            })
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..folds.len()).map(move |f| (g, f)))
        .collect();
    let losses: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(g, f)| {
            let mut pl = problems[f].pl.clone();
            pl.lambda1 = grid[g];
            let fit = newton(&pl, opts.max_iter, opts.grad_tol)
                .map_err(|e| e.with_context(format!("λ1 = {}, fold {f}", grid[g])))?;
            Ok(match opts.cv_score {
                CvScore::LogLikelihood => problems[f].held_out_loss(&fit.coef),
                CvScore::PseudoRisk => problems[f].held_out_risk(&fit.coef),
            })
        })
        .collect();
    let mut scores = vec![0.0; grid.len()];
    for (&(g, _), r) in jobs.iter().zip(losses) {
        scores[g] += r? / n as f64;
    }
    let mut best = 0;
    for i in 1..grid.len() {
        if scores[i] < scores[best] || (scores[i] == scores[best] && grid[i] > grid[best]) {
            best = i;
        }
    }
    Ok(Lambda1Selection {
        grid: grid.to_vec(),
        scores,
        chosen: grid[best],
    })
}

/// Selects `λ1` on the default grid and fits on all rows.
pub fn fit_with_cv(
    x: &Mat,
    domain: Option<DomainBox>,
    opts: &SsAnovaOptions,
) -> Result<(SsAnovaModel, Lambda1Selection)> {
    let domain = match domain {
        Some(b) => b,
        None => DomainBox::from_data(x, opts.box_margin)?,
    };
    let sel = select_lambda1(x, &default_lambda1_grid(), Some(domain.clone()), opts)?;
    let model = fit_logistic_density(x, sel.chosen, None, Some(domain), opts)?;
    Ok((model, sel))
}
