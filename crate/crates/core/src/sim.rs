//! Simulation designs, divergence measures and edge-recovery metrics.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cggm::{fit_cggm, CggmModel, SolverOptions};
use crate::data::{sufficient_stats, Dataset};
use crate::error::{Error, Result};
use crate::graph::{assemble_graph, build_zeta, forward_select, GraphEstimate, Ranking, EDGE_TOL};
use crate::linalg::{cholesky, inverse_pd, log_det_pd, sym_eigenvalues, Mat};
use crate::ssanova::{fit_with_cv, DomainBox, Quadrature, QuadratureRule, SsAnovaOptions};
use crate::tuning::{grid_select_with_models, Criterion, Grid, TuningOptions};

/// Seed of stream `k` derived from a master seed: two rounds of the
/// SplitMix64 finalizer over `seed + splitmix(k + 1)`.
pub fn stream_seed(seed: u64, k: u64) -> u64 {
    splitmix64(seed.wrapping_add(splitmix64(k.wrapping_add(1))))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, k: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, k))
}

/// Two-component spherical Gaussian mixture `ωN(μ1, σ²I) + (1−ω)N(μ2, σ²I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub omega: f64,
    pub sigma: f64,
    pub mu1: Vec<f64>,
    pub mu2: Vec<f64>,
}

impl Mixture {
    /// Component means `(1, 0, −1)` and `(0, −1, 1)`.
    pub fn standard(omega: f64, sigma: f64) -> Self {
        Mixture {
            omega,
            sigma,
            mu1: vec![1.0, 0.0, -1.0],
            mu2: vec![0.0, -1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) || !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "mixture needs ω in [0, 1] and σ > 0, got ω = {}, σ = {}",
                self.omega, self.sigma
            )));
        }
        if self.mu1.len() != self.mu2.len() {
            return Err(Error::DimensionMismatch(
                "mixture means differ in length".into(),
            ));
        }
        Ok(())
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        let s2 = self.sigma * self.sigma;
        let norm = -0.5 * d * (2.0 * std::f64::consts::PI * s2).ln();
        let q = |mu: &[f64]| -> f64 {
            x.iter()
                .zip(mu)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / (2.0 * s2)
        };
        let a = self.omega.ln() - q(&self.mu1);
        let b = (1.0 - self.omega).ln() - q(&self.mu2);
        let m = a.max(b);
        if m == f64::NEG_INFINITY {
            return m;
        }
        norm + m + ((a - m).exp() + (b - m).exp()).ln()
    }

    /// Second moment `E[xxᵀ]`.
    pub fn second_moment(&self) -> Mat {
        let d = self.mu1.len();
        let s2 = self.sigma * self.sigma;
        Mat::from_fn(d, d, |i, j| {
            let diag = if i == j { s2 } else { 0.0 };
            diag + self.omega * self.mu1[i] * self.mu1[j]
                + (1.0 - self.omega) * self.mu2[i] * self.mu2[j]
        })
    }
}

/// How the covariates are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum XDesign {
    Mixture(Mixture),
    /// `(X, Y)` jointly Gaussian with precision `Ω`.
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n: usize,
    pub d: usize,
    pub p: usize,
    pub x_design: XDesign,
    pub edge_prob: f64,
    /// Edge probability among covariates; defaults to `edge_prob`.
    pub x_edge_prob: Option<f64>,
    pub seed: u64,
}

impl SimulationConfig {
    /// Mixture covariates with `n = 200`, `d = 3`, `p = 25`.
    pub fn table1(omega: f64, sigma: f64, seed: u64) -> Self {
        SimulationConfig {
            n: 200,
            d: 3,
            p: 25,
            x_design: XDesign::Mixture(Mixture::standard(omega, sigma)),
            edge_prob: 0.2,
            x_edge_prob: None,
            seed,
        }
    }

    /// Jointly Gaussian design with `d = 3`, `p = 25`.
    pub fn table2(n: usize, seed: u64) -> Self {
        SimulationConfig {
            n,
            d: 3,
            p: 25,
            x_design: XDesign::Gaussian,
            edge_prob: 0.2,
            x_edge_prob: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.p == 0 {
            return Err(Error::InvalidArgument("need n ≥ 2 and p ≥ 1".into()));
        }
        let ok = |q: f64| q > 0.0 && q < 1.0;
        if !ok(self.edge_prob) {
            return Err(Error::InvalidArgument(format!(
                "edge probability must lie in (0, 1), got {}",
                self.edge_prob
            )));
        }
        if let Some(q) = self.x_edge_prob {
            if !(0.0..1.0).contains(&q) {
                return Err(Error::InvalidArgument(format!(
                    "covariate edge probability must lie in [0, 1), got {q}"
                )));
            }
        }
        if let XDesign::Mixture(m) = &self.x_design {
            m.validate()?;
            if m.mu1.len() != self.d {
                return Err(Error::DimensionMismatch(format!(
                    "mixture means have length {}, d = {}",
                    m.mu1.len(),
                    self.d
                )));
            }
        }
        Ok(())
    }
}

/// Precision of `(X, Y)` with its conditional-model partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub d: usize,
    #[serde(with = "crate::dense")]
    pub omega_full: Mat,
    #[serde(with = "crate::dense")]
    pub theta_true: Mat,
    #[serde(with = "crate::dense")]
    pub lambda_true: Mat,
    /// Covariate graph; `None` when the design does not define one.
    pub x_adjacency: Option<Vec<Vec<u8>>>,
}

impl GroundTruth {
    pub fn from_precision(omega: Mat, d: usize, x_graph_known: bool) -> Result<Self> {
        let dim = omega.nrows();
        if d > dim || omega.ncols() != dim {
            return Err(Error::DimensionMismatch("precision partition".into()));
        }
        cholesky(&omega).ok_or(Error::NotPositiveDefinite("Ω"))?;
        let p = dim - d;
        let theta_true = omega.view((0, d), (d, p)).into_owned();
        let lambda_true = omega.view((d, d), (p, p)).into_owned();
        let x_adjacency = x_graph_known.then(|| {
            (0..d)
                .map(|i| {
                    (0..d)
                        .map(|j| u8::from(i != j && omega[(i, j)].abs() > EDGE_TOL))
                        .collect()
                })
                .collect()
        });
        Ok(GroundTruth {
            d,
            omega_full: omega,
            theta_true,
            lambda_true,
            x_adjacency,
        })
    }

    pub fn cggm(&self) -> Result<CggmModel> {
        CggmModel::from_parts(self.lambda_true.clone(), self.theta_true.clone(), 0.0, 0.0)
    }

    /// True graph; covariate pairs are empty when the design leaves them
    /// undefined.
    pub fn graph(&self) -> Result<GraphEstimate> {
        let pi = self
            .x_adjacency
            .clone()
            .unwrap_or_else(|| vec![vec![0; self.d]; self.d]);
        assemble_graph(&self.cggm()?, &pi, None, None)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: GroundTruth = serde_json::from_str(s)?;
        let known = raw.x_adjacency.is_some();
        let g = GroundTruth::from_precision(raw.omega_full.clone(), raw.d, known)?;
        if let Some(a) = &raw.x_adjacency {
            if a != g.x_adjacency.as_ref().unwrap() {
                return Err(Error::InvalidData(
                    "covariate adjacency disagrees with the precision".into(),
                ));
            }
        }
        if (&g.omega_full - g.omega_full.transpose()).amax() > 0.0 {
            return Err(Error::InvalidData("precision is not symmetric".into()));
        }
        Ok(g)
    }
}

/// Rows drawn from the mixture.
pub fn gen_mixture_x(mix: &Mixture, n: usize, rng: &mut impl Rng) -> Result<Mat> {
    mix.validate()?;
    let d = mix.mu1.len();
    let mut x = Mat::zeros(n, d);
    for i in 0..n {
        let mu = if rng.gen::<f64>() < mix.omega {
            &mix.mu1
        } else {
            &mix.mu2
        };
        for k in 0..d {
            x[(i, k)] = mu[k] + mix.sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(x)
}

/// Sparse symmetric precision: each off-diagonal pair is an edge with
/// probability `edge_prob` (`x_edge_prob` among the first `d` indices),
/// with magnitude uniform on `[0.1, 0.4]` and a random sign; the diagonal is
/// `|λ_min| + 0.5` of the off-diagonal part.
pub fn gen_sparse_precision(
    dim: usize,
    d: usize,
    edge_prob: f64,
    x_edge_prob: f64,
    rng: &mut impl Rng,
) -> Result<Mat> {
    if dim < 2 {
        return Err(Error::InvalidArgument(
            "precision needs dimension ≥ 2".into(),
        ));
    }
    let mut a = Mat::zeros(dim, dim);
    for i in 0..dim {
        for j in i + 1..dim {
            let prob = if j < d { x_edge_prob } else { edge_prob };
            if rng.gen::<f64>() < prob {
                let mag = rng.gen_range(0.1..=0.4);
                let v = if rng.gen::<bool>() { mag } else { -mag };
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
    }
    let lmin = sym_eigenvalues(&a)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let diag = lmin.abs() + 0.5;
    for i in 0..dim {
        a[(i, i)] = diag;
    }
    cholesky(&a).ok_or(Error::NotPositiveDefinite("generated precision"))?;
    Ok(a)
}

/// Rows of `Y` drawn from `N(−Λ⁻¹Θᵀx_i, Λ⁻¹)`.
pub fn sample_y_given_x(x: &Mat, theta: &Mat, lambda: &Mat, rng: &mut impl Rng) -> Result<Mat> {
    let p = lambda.nrows();
    if theta.nrows() != x.ncols() || theta.ncols() != p {
        return Err(Error::DimensionMismatch("Θ does not match X and Λ".into()));
    }
    let chol = cholesky(lambda).ok_or(Error::NotPositiveDefinite("Λ"))?;
    let l = chol.l();
    let sigma = chol.inverse();
    let mean = -(x * theta * &sigma);
    let n = x.nrows();
    let z = Mat::from_fn(p, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    // Λ = LLᵀ, so L⁻ᵀz has covariance Λ⁻¹
    let noise = l
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or(Error::NotPositiveDefinite("Λ"))?;
    Ok(mean + noise.transpose())
}

/// Rows of `X` from the Gaussian marginal implied by `Ω`.
pub fn gen_gaussian_x(omega: &Mat, d: usize, n: usize, rng: &mut impl Rng) -> Result<Mat> {
    let cov = inverse_pd(omega)?.view((0, 0), (d, d)).into_owned();
    let chol = cholesky(&cov).ok_or(Error::NotPositiveDefinite("covariate covariance"))?;
    let z = Mat::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(z * chol.l().transpose())
}

/// Draws a truth and a data set. Streams: 0 for `Ω`, 1 for `X`, 2 for `Y`.
pub fn simulate(config: &SimulationConfig) -> Result<(GroundTruth, Dataset)> {
    config.validate()?;
    let (d, p) = (config.d, config.p);
    let xq = config.x_edge_prob.unwrap_or(config.edge_prob);
    let omega = gen_sparse_precision(
        d + p,
        d,
        config.edge_prob,
        xq,
        &mut stream_rng(config.seed, 0),
    )?;
    let gaussian = matches!(config.x_design, XDesign::Gaussian);
    let truth = GroundTruth::from_precision(omega, d, gaussian)?;
    let mut xr = stream_rng(config.seed, 1);
    let x = match &config.x_design {
        XDesign::Mixture(m) => gen_mixture_x(m, config.n, &mut xr)?,
        XDesign::Gaussian => gen_gaussian_x(&truth.omega_full, d, config.n, &mut xr)?,
    };
    let y = sample_y_given_x(
        &x,
        &truth.theta_true,
        &truth.lambda_true,
        &mut stream_rng(config.seed, 2),
    )?;
    Ok((truth, Dataset::from_blocks(x, y)?))
}

/// Gaussian KL divergence `KL(N(μ0, Σ0) ‖ N(μ1, Σ1))` given `Λ1 = Σ1⁻¹`
/// and the log-determinants of the precisions. The trace term is formed as
/// `tr(Λ1(Σ0 − Σ1))`, so equal inputs give exactly 0.
fn gaussian_kl_prec(
    mu0: &[f64],
    sigma0: &Mat,
    logdet0: f64,
    mu1: &[f64],
    lambda1: &Mat,
    sigma1: &Mat,
    logdet1: f64,
) -> f64 {
    let p = mu0.len();
    let tr = (lambda1 * (sigma0 - sigma1)).trace();
    let mut quad = 0.0;
    for i in 0..p {
        for j in 0..p {
            quad += (mu1[i] - mu0[i]) * lambda1[(i, j)] * (mu1[j] - mu0[j]);
        }
    }
    0.5 * (tr + (logdet0 - logdet1) + quad)
}

/// `(1/n) Σ_i KL(f0(y | X_i) ‖ f̂(y | X_i))`.
pub fn kl_cond_empirical(theta0: &Mat, lambda0: &Mat, model: &CggmModel, x: &Mat) -> Result<f64> {
    let truth = CggmModel::from_parts(lambda0.clone(), theta0.clone(), 0.0, 0.0)?;
    if model.d() != truth.d() || model.p() != truth.p() || x.ncols() != truth.d() {
        return Err(Error::DimensionMismatch("models and X disagree".into()));
    }
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("no rows".into()));
    }
    let ld0 = log_det_pd(lambda0)?;
    let ld1 = log_det_pd(&model.lambda)?;
    // the trace and log-determinant part does not depend on x
    let base = gaussian_kl_prec(
        &vec![0.0; truth.p()],
        &truth.sigma,
        ld0,
        &vec![0.0; truth.p()],
        &model.lambda,
        &model.sigma,
        ld1,
    );
    let a = &model.sigma * model.theta.transpose() - &truth.sigma * truth.theta.transpose();
    let m = a.transpose() * &model.lambda * &a;
    let mut quad = 0.0;
    for i in 0..x.nrows() {
        let r = x.row(i);
        quad += (r * &m * r.transpose())[(0, 0)];
    }
    Ok(base + 0.5 * quad / x.nrows() as f64)
}

/// Symmetric KL between two conditional Gaussian models averaged over the
/// respective covariate laws: `½tr(aᵀΛ̂a M_{f0}) + ½tr(aᵀΛ0 a M_{f̂}) +
/// ½tr(Λ̂⁻¹Λ0 + Λ0⁻¹Λ̂) − p` with `a = Λ̂⁻¹Θ̂ᵀ − Λ0⁻¹Θ0ᵀ` and `M` the
/// second-moment matrices.
pub fn skl_conditional_explicit(
    theta0: &Mat,
    lambda0: &Mat,
    theta_hat: &Mat,
    lambda_hat: &Mat,
    m_f0: &Mat,
    m_fhat: &Mat,
) -> Result<f64> {
    let s0 = inverse_pd(lambda0)?;
    let s1 = inverse_pd(lambda_hat)?;
    let d = theta0.nrows();
    if theta_hat.shape() != theta0.shape() || lambda_hat.shape() != lambda0.shape() {
        return Err(Error::DimensionMismatch(
            "conditional models differ in shape".into(),
        ));
    }
    if m_f0.shape() != (d, d) || m_fhat.shape() != (d, d) {
        return Err(Error::DimensionMismatch("second-moment matrices".into()));
    }
    let a = &s1 * theta_hat.transpose() - &s0 * theta0.transpose();
    let q0 = (a.transpose() * lambda_hat * &a * m_f0).trace();
    let q1 = (a.transpose() * lambda0 * &a * m_fhat).trace();
    // tr(Λ̂⁻¹Λ0 + Λ0⁻¹Λ̂) − 2p, zero exactly for equal precisions
    let tr = ((&s1 - &s0) * (lambda0 - lambda_hat)).trace();
    Ok(0.5 * (q0 + q1 + tr))
}

/// `KL(N(m0, C0) ‖ N(m1, C1))` from covariances.
pub fn gaussian_kl(m0: &[f64], c0: &Mat, m1: &[f64], c1: &Mat) -> Result<f64> {
    if m0.len() != c0.nrows() || m1.len() != c1.nrows() || c0.shape() != c1.shape() {
        return Err(Error::DimensionMismatch("Gaussian parameters".into()));
    }
    let prec1 = inverse_pd(c1)?;
    let ld0 = -log_det_pd(c0)?;
    let ld1 = -log_det_pd(c1)?;
    Ok(gaussian_kl_prec(m0, c0, ld0, m1, &prec1, c1, ld1))
}

/// Gaussian fitted to the rows of `x` by maximum likelihood.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    #[serde(with = "crate::dense")]
    pub cov: Mat,
    #[serde(skip)]
    prec: Mat,
    #[serde(skip)]
    log_norm: f64,
}

impl GaussianFit {
    pub fn fit(x: &Mat) -> Result<Self> {
        let (n, d) = (x.nrows(), x.ncols());
        if n < 2 {
            return Err(Error::InvalidArgument("need at least two rows".into()));
        }
        let mean: Vec<f64> = (0..d).map(|k| x.column(k).mean()).collect();
        let cov = Mat::from_fn(d, d, |i, j| {
            (0..n)
                .map(|r| (x[(r, i)] - mean[i]) * (x[(r, j)] - mean[j]))
                .sum::<f64>()
                / n as f64
        });
        Self::new(mean, cov)
    }

    pub fn new(mean: Vec<f64>, cov: Mat) -> Result<Self> {
        let prec = inverse_pd(&cov)?;
        let d = mean.len() as f64;
        let log_norm = -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det_pd(&cov)?);
        Ok(GaussianFit {
            mean,
            cov,
            prec,
            log_norm,
        })
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut q = 0.0;
        for i in 0..d {
            for j in 0..d {
                q += (x[i] - self.mean[i]) * self.prec[(i, j)] * (x[j] - self.mean[j]);
            }
        }
        self.log_norm - 0.5 * q
    }

    pub fn second_moment(&self) -> Mat {
        let d = self.mean.len();
        Mat::from_fn(d, d, |i, j| self.cov[(i, j)] + self.mean[i] * self.mean[j])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalKl {
    pub kl: f64,
    /// Log of each density's mass on the box before renormalization.
    pub log_mass_f0: f64,
    pub log_mass_fhat: f64,
}

/// `∫ f0 log(f0 / f̂)` over a box, both densities renormalized on the box
/// under `quad` (nodes in unit coordinates).
pub fn kl_marginal_x(
    log_f0: &(dyn Fn(&[f64]) -> f64 + Sync),
    log_fhat: &(dyn Fn(&[f64]) -> f64 + Sync),
    domain: &DomainBox,
    quad: &Quadrature,
) -> Result<MarginalKl> {
    let vol_log = domain.volume().ln();
    let vals: Vec<(f64, f64)> = (0..quad.len())
        .into_par_iter()
        .map(|t| {
            let x = domain.from_unit(&quad.node(t));
            (log_f0(&x), log_fhat(&x))
        })
        .collect();
    for (t, (a, b)) in vals.iter().enumerate() {
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-positive density at {:?}",
                domain.from_unit(&quad.node(t))
            )));
        }
    }
    let lse = |f: &dyn Fn(&(f64, f64)) -> f64| -> f64 {
        let m = vals.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = vals
            .iter()
            .zip(&quad.weights)
            .map(|(v, w)| w * (f(v) - m).exp())
            .sum();
        m + s.ln() + vol_log
    };
    let z0 = lse(&|v| v.0);
    let z1 = lse(&|v| v.1);
    let mut kl = 0.0;
    for ((a, b), w) in vals.iter().zip(&quad.weights) {
        let la = a - z0;
        let lb = b - z1;
        kl += w * (la + vol_log).exp() * (la - lb);
    }
    Ok(MarginalKl {
        kl,
        log_mass_f0: z0,
        log_mass_fhat: z1,
    })
}

/// Confusion counts and rates for one block of undirected pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub sen: f64,
    pub spe: f64,
    pub f1: f64,
}

impl BlockMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
        BlockMetrics {
            tp,
            fp,
            fn_,
            tn,
            sen: ratio(tp, tp + fn_),
            spe: ratio(tn, tn + fp),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
        }
    }

    fn add(&self, o: &BlockMetrics) -> BlockMetrics {
        BlockMetrics::from_counts(
            self.tp + o.tp,
            self.fp + o.fp,
            self.fn_ + o.fn_,
            self.tn + o.tn,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub xx: Option<BlockMetrics>,
    pub xy: BlockMetrics,
    pub yy: BlockMetrics,
    /// Pooled over the blocks that are scored.
    pub overall: BlockMetrics,
}

/// Edge recovery per block. The covariate block is scored only when
/// `score_xx` is set.
pub fn confusion_metrics(
    estimated: &GraphEstimate,
    truth: &GraphEstimate,
    score_xx: bool,
) -> Result<ConfusionReport> {
    if estimated.nodes.len() != truth.nodes.len() || estimated.d != truth.d {
        return Err(Error::DimensionMismatch(
            "graphs have different node sets".into(),
        ));
    }
    let d = truth.d;
    let size = truth.nodes.len();
    let mut counts = [[0usize; 4]; 3];
    for i in 0..size {
        for j in i + 1..size {
            let block = if j < d {
                0
            } else if i < d {
                1
            } else {
                2
            };
            let e = estimated.adjacency[i][j] != 0;
            let t = truth.adjacency[i][j] != 0;
            let slot = match (e, t) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            counts[block][slot] += 1;
        }
    }
    let m = |c: [usize; 4]| BlockMetrics::from_counts(c[0], c[1], c[2], c[3]);
    let xx = m(counts[0]);
    let xy = m(counts[1]);
    let yy = m(counts[2]);
    let mut overall = xy.add(&yy);
    if score_xx {
        overall = overall.add(&xx);
    }
    Ok(ConfusionReport {
        xx: score_xx.then_some(xx),
        xy,
        yy,
        overall,
    })
}

/// Estimators compared in a replication study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method", content = "criterion")]
pub enum Method {
    /// Density estimate for X with a tuned two-penalty conditional model.
    Csscgg(Criterion),
    /// Gaussian fit of X with the unpenalized conditional model.
    Mle,
    /// As `Csscgg` with one shared penalty `λ2 = λ3`.
    SinglePenalty(Criterion),
}

impl Method {
    pub fn label(&self) -> String {
        let c = |c: &Criterion| match c {
            Criterion::Lookl => "lookl",
            Criterion::Bic => "bic",
            Criterion::Kfold => "cv",
            Criterion::LoocvOracle => "loocv",
        };
        match self {
            Method::Csscgg(k) => format!("csscgg_{}", c(k)),
            Method::Mle => "mle".into(),
            Method::SinglePenalty(k) => format!("single_{}", c(k)),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    /// Parses a label as produced by [`Method::label`].
    fn from_str(s: &str) -> Result<Self> {
        if s == "mle" {
            return Ok(Method::Mle);
        }
        let bad = || {
            Error::InvalidArgument(format!(
                "unknown method '{s}' (expected mle, csscgg_<criterion> or single_<criterion>)"
            ))
        };
        let (head, crit) = s.split_once('_').ok_or_else(bad)?;
        let crit: Criterion = crit.parse()?;
        match head {
            "csscgg" => Ok(Method::Csscgg(crit)),
            "single" => Ok(Method::SinglePenalty(crit)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyOptions {
    pub methods: Vec<Method>,
    pub grid_size: usize,
    pub cutoff: f64,
    pub solver: SolverOptions,
    pub ssanova: SsAnovaOptions,
    /// Rule for KL of the covariate densities, in unit coordinates of the
    /// density box.
    pub kl_quadrature: QuadratureRule,
    pub folds: usize,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            methods: vec![Method::Csscgg(Criterion::Kfold), Method::Mle],
            grid_size: 10,
            cutoff: crate::graph::DEFAULT_CUTOFF,
            solver: SolverOptions::default(),
            ssanova: SsAnovaOptions::default(),
            kl_quadrature: QuadratureRule::CompositeGaussLegendre {
                panels: 8,
                nodes_per_panel: 6,
            },
            folds: 5,
        }
    }
}

/// Metrics of one method on one replication, keyed by metric name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub replication: usize,
    pub seed: u64,
    pub method: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

/// Long-format CSV with header `replication,seed,method,metric,value`.
pub fn rows_to_csv(rows: &[ReplicationRow]) -> String {
    let mut s = String::from("replication,seed,method,metric,value\n");
    for r in rows {
        for (k, v) in &r.metrics {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.replication, r.seed, r.method, k, v
            ));
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub schema_version: u32,
    pub config: SimulationConfig,
    pub replications: usize,
    pub failures: Vec<String>,
    pub rows: Vec<ReplicationRow>,
    /// `method → metric → summary`.
    pub summary: BTreeMap<String, BTreeMap<String, MetricSummary>>,
}

impl StudyReport {
    /// One line per (replication, method, metric).
    pub fn to_csv(&self) -> String {
        rows_to_csv(&self.rows)
    }

    pub fn mean(&self, method: &str, metric: &str) -> Option<f64> {
        self.summary.get(method)?.get(metric).map(|m| m.mean)
    }

    /// Per-replication values of a metric, in replication order.
    pub fn values(&self, method: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| r.metrics.get(metric).copied())
            .collect()
    }
}

/// Mean and sample standard deviation of every metric per method,
/// ignoring NaN values.
pub fn summarize(rows: &[ReplicationRow]) -> BTreeMap<String, BTreeMap<String, MetricSummary>> {
    let mut acc: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        for (k, v) in &r.metrics {
            if v.is_finite() {
                acc.entry(r.method.clone())
                    .or_default()
                    .entry(k.clone())
                    .or_default()
                    .push(*v);
            }
        }
    }
    acc.into_iter()
        .map(|(m, metrics)| {
            let inner = metrics
                .into_iter()
                .map(|(k, v)| {
                    let n = v.len();
                    let mean = v.iter().sum::<f64>() / n as f64;
                    let sd = if n > 1 {
                        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64)
                            .sqrt()
                    } else {
                        0.0
                    };
                    (k, MetricSummary { mean, sd, count: n })
                })
                .collect();
            (m, inner)
        })
        .collect()
}

fn tuned_cggm(
    ds: &Dataset,
    criterion: Criterion,
    single: bool,
    opts: &StudyOptions,
    seed: u64,
) -> Result<CggmModel> {
    let stats = sufficient_stats(ds);
    let grid = if single {
        let base = Grid::default_for(&stats, opts.grid_size);
        let top = base
            .points
            .iter()
            .fold(0.0f64, |m, &(a, b)| m.max(a).max(b));
        let lo = top * 0.01;
        let vals = crate::tuning::log_spaced(lo, top, opts.grid_size);
        Grid {
            points: vals.into_iter().map(|v| (v, v)).collect(),
        }
    } else {
        Grid::default_for(&stats, opts.grid_size)
    };
    let topts = TuningOptions {
        solver: opts.solver.clone(),
        folds: opts.folds,
        seed,
        ..Default::default()
    };
    let (_, model) = grid_select_with_models(ds, &grid, criterion, &topts)?;
    Ok(model)
}

/// Runs one replication for every requested method.
pub fn run_replication(
    config: &SimulationConfig,
    opts: &StudyOptions,
    replication: usize,
) -> Result<Vec<ReplicationRow>> {
    let (truth, ds) = simulate(config)?;
    let truth_graph = truth.graph()?;
    let score_xx = truth.x_adjacency.is_some();
    let d = config.d;
    let needs_density = opts.methods.iter().any(|m| !matches!(m, Method::Mle));

    let ss_opts = SsAnovaOptions {
        seed: stream_seed(config.seed, 3),
        ..opts.ssanova.clone()
    };
    let density = if needs_density && d > 0 {
        Some(fit_with_cv(&ds.x, None, &ss_opts)?.0)
    } else {
        None
    };
    let gauss = if d > 0 {
        Some(GaussianFit::fit(&ds.x)?)
    } else {
        None
    };
    let kl_box = match &density {
        Some(m) => m.domain.clone(),
        None if d > 0 => DomainBox::from_data(&ds.x, opts.ssanova.box_margin)?,
        None => DomainBox::new(vec![], vec![])?,
    };
    let kl_quad = Quadrature::new(opts.kl_quadrature.clone(), d)?;
    let log_f0: Box<dyn Fn(&[f64]) -> f64 + Sync> = match &config.x_design {
        XDesign::Mixture(m) => {
            let m = m.clone();
            Box::new(move |x: &[f64]| m.log_density(x))
        }
        XDesign::Gaussian => {
            let cov = inverse_pd(&truth.omega_full)?
                .view((0, 0), (d, d))
                .into_owned();
            let g = GaussianFit::new(vec![0.0; d], cov)?;
            Box::new(move |x: &[f64]| g.log_density(x))
        }
    };
    let kl_ss = match &density {
        Some(m) => Some(
            kl_marginal_x(
                &*log_f0,
                &|x| m.log_density(x).unwrap_or(f64::NAN),
                &kl_box,
                &kl_quad,
            )?
            .kl,
        ),
        None => None,
    };
    let kl_gauss = match &gauss {
        Some(g) => Some(kl_marginal_x(&*log_f0, &|x| g.log_density(x), &kl_box, &kl_quad)?.kl),
        None => None,
    };

    let mut rows = Vec::new();
    for (mi, method) in opts.methods.iter().enumerate() {
        let seed = stream_seed(config.seed, 10 + mi as u64);
        let model = match method {
            Method::Csscgg(c) => tuned_cggm(&ds, *c, false, opts, seed)?,
            Method::SinglePenalty(c) => tuned_cggm(&ds, *c, true, opts, seed)?,
            Method::Mle => fit_cggm(&sufficient_stats(&ds), 0.0, 0.0, &opts.solver)?,
        };
        let kl_cond = kl_cond_empirical(&truth.theta_true, &truth.lambda_true, &model, &ds.x)?;
        let kl_x = match method {
            Method::Mle => kl_gauss,
            _ => kl_ss,
        };
        let pi = match (method, &density) {
            (Method::Mle, _) | (_, None) => vec![vec![u8::from(d > 1); d]; d]
                .into_iter()
                .enumerate()
                .map(|(i, mut r)| {
                    r[i] = 0;
                    r
                })
                .collect(),
            (_, Some(dm)) => {
                if d >= 2 {
                    let zeta = build_zeta(dm, &model, None)?;
                    forward_select(&zeta, opts.cutoff, Ranking::Upfront)?.pi
                } else {
                    vec![vec![0; d]; d]
                }
            }
        };
        let graph = assemble_graph(&model, &pi, None, None)?;
        let conf = confusion_metrics(&graph, &truth_graph, score_xx)?;
        let mut metrics = BTreeMap::new();
        metrics.insert("kl_cond".to_string(), kl_cond);
        if let Some(k) = kl_x {
            metrics.insert("kl_x".into(), k);
            metrics.insert("kl_overall".into(), k + kl_cond);
        }
        metrics.insert("lambda2".into(), model.lambda2);
        metrics.insert("lambda3".into(), model.lambda3);
        let mut put = |name: &str, b: &BlockMetrics| {
            metrics.insert(format!("{name}_sen"), b.sen);
            metrics.insert(format!("{name}_spe"), b.spe);
            metrics.insert(format!("{name}_f1"), b.f1);
        };
        if let Some(xx) = &conf.xx {
            put("xx", xx);
        }
        put("xy", &conf.xy);
        put("yy", &conf.yy);
        put("overall", &conf.overall);
        rows.push(ReplicationRow {
            replication,
            seed: config.seed,
            method: method.label(),
            metrics,
        });
    }
    Ok(rows)
}

/// Runs `reps` replications on independent streams `stream_seed(seed, k)`.
/// Failed replications are logged and listed in the report.
pub fn run_replication_study(
    base: &SimulationConfig,
    opts: &StudyOptions,
    reps: usize,
    seed: u64,
) -> Result<StudyReport> {
    run_replication_study_with(base, opts, reps, seed, &|_, _| {})
}

/// As [`run_replication_study`], calling `on_done` as each replication
/// finishes, in completion order.
pub fn run_replication_study_with(
    base: &SimulationConfig,
    opts: &StudyOptions,
    reps: usize,
    seed: u64,
    on_done: &(dyn Fn(usize, &Result<Vec<ReplicationRow>>) + Sync),
) -> Result<StudyReport> {
    if reps == 0 {
        return Err(Error::InvalidArgument(
            "need at least one replication".into(),
        ));
    }
    base.validate()?;
    let results: Vec<(usize, Result<Vec<ReplicationRow>>)> = (0..reps)
        .into_par_iter()
        .map(|k| {
            let cfg = SimulationConfig {
                seed: stream_seed(seed, k as u64),
                ..base.clone()
            };
            let r = run_replication(&cfg, opts, k);
            on_done(k, &r);
            (k, r)
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (k, r) in results {
        match r {
            Ok(mut v) => rows.append(&mut v),
            Err(e) => {
                log::warn!("replication {k} failed: {e}");
                failures.push(format!("replication {k}: {e}"));
            }
        }
    }
    let summary = summarize(&rows);
    Ok(StudyReport {
        schema_version: 1,
        config: SimulationConfig {
            seed,
            ..base.clone()
        },
        replications: reps,
        failures,
        rows,
        summary,
    })
}
