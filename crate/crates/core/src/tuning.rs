//! Selection of the penalty pair `(λ2, λ3)`: the closed-form leave-one-out
//! KL score, BIC, k-fold cross-validation and a brute-force leave-one-out
//! reference.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cggm::{fit_cggm, neg_loglik_l2, CggmModel, Init, SolverOptions, ZERO_TOL};
use crate::data::{sufficient_stats, Dataset, SufficientStats};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, kron, solve_spd_with_ridge, Mat};

/// Largest linear system (`p² + pd`) the closed-form score will assemble.
pub const LOOKL_MAX_DIM: usize = 10_000;

/// Ridge scale for numerically singular Schur complements.
const SCHUR_RIDGE: f64 = 1e-8;

/// Second-derivative blocks of `f = -l2` at a fitted model, with the
/// derivatives taken with respect to `vec(Θ)`, `vec(Λ)` and `vec(S_xx)`
/// (column-major).
///
/// `B` and the `ΣΘᵀS_xxΘΣ` part of `C` are the forms obtained by
/// differentiating as if `Λ` had free entries. They agree with the Hessian
/// only on symmetric directions, so [`LooklWorkspace::first_order_change`]
/// projects them onto symmetric `δΛ` before solving.
#[derive(Clone, Debug)]
pub struct LooklWorkspace {
    /// `∂²f/∂Θ² = -2Σ⊗S_xx`, pd×pd.
    pub a: Mat,
    /// `∂²f/∂Θ∂Λ = 2Σ⊗S_xxΘΣ`, pd×p².
    pub b: Mat,
    /// `∂²f/∂Λ² = -Σ⊗(Σ + 2ΣΘᵀS_xxΘΣ)`, p²×p².
    pub c: Mat,
    /// `∂²f/∂Θ∂S_xx = -2ΣΘᵀ⊗I_d`, pd×d².
    pub d: Mat,
    /// `∂²f/∂Λ∂S_xx = ΣΘᵀ⊗ΣΘᵀ`, p²×d².
    pub e: Mat,
    p: usize,
}

impl LooklWorkspace {
    pub fn new(stats: &SufficientStats, model: &CggmModel) -> Result<Self> {
        let (d, p) = (stats.d(), stats.p());
        if model.p() != p || model.d() != d {
            return Err(Error::DimensionMismatch(
                "model and data have different dimensions".into(),
            ));
        }
        let dim = p * p + p * d;
        if dim > LOOKL_MAX_DIM {
            return Err(Error::InvalidArgument(format!(
                "closed-form score needs a {dim}x{dim} system (limit {LOOKL_MAX_DIM}); \
                 use k-fold cross-validation or BIC for this many responses"
            )));
        }
        let sigma = &model.sigma;
        let st = sigma * model.theta.transpose(); // ΣΘᵀ, p×d
        let sxx_theta_sigma = &stats.sxx * &model.theta * sigma; // d×p
        let k = &st * &stats.sxx * st.transpose();
        Ok(LooklWorkspace {
            a: kron(sigma, &stats.sxx) * -2.0,
            b: kron(sigma, &sxx_theta_sigma) * 2.0,
            c: -kron(sigma, &(sigma + k * 2.0)),
            d: kron(&st, &Mat::identity(d, d)) * -2.0,
            e: kron(&st, &st),
            p,
        })
    }

    /// First-order change of `(vec Λ̂, vec Θ̂)` when the statistics move by
    /// `(v_yy, v_xy, v_xx)`, one perturbation per column. `idx_l` indexes
    /// `vec(Λ)` and must be closed under transposition; `idx_t` indexes
    /// `vec(Θ)`. Rows of `v_yy` and `v_xy` follow those index lists; `v_xx`
    /// is full `d²`. Returns the two changes and the ridge used.
    pub fn first_order_change(
        &self,
        form: HessianForm,
        idx_l: &[usize],
        idx_t: &[usize],
        v_yy: &Mat,
        v_xy: &Mat,
        v_xx: &Mat,
    ) -> Result<(Mat, Mat, f64)> {
        let p = self.p;
        let all_dd: Vec<usize> = (0..self.d.ncols()).collect();
        let pos: std::collections::HashMap<usize, usize> =
            idx_l.iter().enumerate().map(|(r, &v)| (v, r)).collect();
        // projector onto symmetric δΛ within the selected coordinates
        let nl = idx_l.len();
        let mut proj = Mat::zeros(nl, nl);
        for (r, &v) in idx_l.iter().enumerate() {
            let tv = (v / p) + (v % p) * p;
            let t = *pos.get(&tv).ok_or_else(|| {
                Error::InvalidArgument("Λ coordinates must be closed under transposition".into())
            })?;
            match form {
                HessianForm::Symmetric => {
                    proj[(r, r)] += 0.5;
                    proj[(r, t)] += 0.5;
                }
                HessianForm::AsPrinted => proj[(r, r)] = 1.0,
            }
        }
        let c = select(&self.c, idx_l, idx_l);
        let mut c = &proj * c * &proj - (Mat::identity(nl, nl) - &proj);
        crate::linalg::symmetrize_in_place(&mut c);
        let e = select(&self.e, idx_l, &all_dd);
        let mut r_l = v_yy - &e * v_xx;
        let cols = v_yy.ncols();
        if idx_t.is_empty() {
            let (dl, ridge) = solve_neg_definite(&c, &r_l)?;
            return Ok((dl, Mat::zeros(0, cols), ridge));
        }
        let a = select(&self.a, idx_t, idx_t);
        let b = select(&self.b, idx_t, idx_l) * &proj;
        let dm = select(&self.d, idx_t, &all_dd);
        let r_t = v_xy * 2.0 - &dm * v_xx;
        // A is negative definite when S_xx is positive definite
        let (a_inv_rt, rg_a) = solve_neg_definite(&a, &r_t)?;
        let (a_inv_b, _) = solve_neg_definite(&a, &b)?;
        let mut schur = &c - b.transpose() * &a_inv_b;
        crate::linalg::symmetrize_in_place(&mut schur);
        r_l -= b.transpose() * &a_inv_rt;
        let (dl, rg_s) = solve_neg_definite(&schur, &r_l)?;
        let (dt, _) = solve_neg_definite(&a, &(&r_t - &b * &dl))?;
        Ok((dl, dt, rg_a.max(rg_s)))
    }
}

/// How the `Λ` blocks of the second-derivative system are used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianForm {
    /// Restricted to symmetric `δΛ`; the exact derivative of the fitted
    /// parameters with respect to the statistics.
    #[default]
    Symmetric,
    /// `B` and `C` used verbatim on all `p²` coordinates.
    AsPrinted,
}

/// Which coordinates enter the closed-form score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LooklVariant {
    /// Every entry of `Λ` and `Θ`.
    Full,
    /// Only the diagonal of `Λ` and the nonzero entries of both blocks;
    /// penalized zeros stay at zero when one observation is dropped.
    #[default]
    Support,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LooklOptions {
    pub variant: LooklVariant,
    pub hessian: HessianForm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooklScore {
    pub score: f64,
    /// `½ l2(Λ̂, Θ̂)`.
    pub fit_term: f64,
    /// Estimated optimism added to the fit term.
    pub correction: f64,
    /// Ridge added to a singular Schur complement (0 when none).
    pub ridge: f64,
}

fn select(m: &Mat, rows: &[usize], cols: &[usize]) -> Mat {
    Mat::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Solves `S z = rhs` for symmetric negative (semi)definite `S`, adding a
/// ridge when the factorization fails.
fn solve_neg_definite(s: &Mat, rhs: &Mat) -> Result<(Mat, f64)> {
    solve_spd_with_ridge(&(-s), &(-rhs), SCHUR_RIDGE).map_err(|_| {
        Error::Singular(
            "leave-one-out Hessian is singular; try larger penalties or the support-only variant"
                .into(),
        )
    })
}

/// Closed-form leave-one-out KL score of a model fitted to `ds`.
///
/// With `f = -l2`, the first-order conditions at the leave-one-out
/// statistics `S^{(-k)} = S - S_k/n` give
///
/// `C δΛ + Bᵀ δΘ = v_yy - E v_xx`, `B δΛ + A δΘ = 2 v_xy - D v_xx`,
///
/// solved through the Schur complement `C - BᵀA⁻¹B`, and the score is
/// `½ l2(Λ̂, Θ̂) - (1/2n) Σ_k (u_kᵀ δΛ_k + w_kᵀ δΘ_k)`.
pub fn lookl_score(ds: &Dataset, model: &CggmModel, opts: LooklOptions) -> Result<LooklScore> {
    let n = ds.n();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "need at least two observations".into(),
        ));
    }
    let stats = sufficient_stats(ds);
    let ws = LooklWorkspace::new(&stats, model)?;
    let (d, p) = (ds.d(), ds.p());
    let nf = n as f64;

    let (idx_l, idx_t): (Vec<usize>, Vec<usize>) = match opts.variant {
        LooklVariant::Full => ((0..p * p).collect(), (0..p * d).collect()),
        LooklVariant::Support => {
            let il = (0..p * p)
                .filter(|&v| {
                    let (i, j) = (v % p, v / p);
                    i == j || model.lambda[(i, j)].abs() > ZERO_TOL
                })
                .collect();
            let it = (0..p * d)
                .filter(|&v| model.theta[(v % d, v / d)].abs() > ZERO_TOL)
                .collect();
            (il, it)
        }
    };

    // per-observation gradients and statistic differences, one column each
    let sigma = &model.sigma;
    let st = sigma * model.theta.transpose();
    let mut u = Mat::zeros(idx_l.len(), n);
    let mut w = Mat::zeros(idx_t.len(), n);
    let mut vyy = Mat::zeros(idx_l.len(), n);
    let mut vxy = Mat::zeros(idx_t.len(), n);
    let mut vxx = Mat::zeros(d * d, n);
    for k in 0..n {
        let x: Vec<f64> = (0..d).map(|j| ds.x[(k, j)]).collect();
        let y: Vec<f64> = (0..p).map(|j| ds.y[(k, j)]).collect();
        // m = ΣΘᵀx
        let m: Vec<f64> = (0..p)
            .map(|i| (0..d).map(|j| st[(i, j)] * x[j]).sum())
            .collect();
        for (r, &v) in idx_l.iter().enumerate() {
            let (i, j) = (v % p, v / p);
            u[(r, k)] = sigma[(i, j)] - y[i] * y[j] + m[i] * m[j];
            vyy[(r, k)] = -y[i] * y[j] / nf;
        }
        for (r, &v) in idx_t.iter().enumerate() {
            let (i, j) = (v % d, v / d);
            w[(r, k)] = -2.0 * x[i] * (y[j] + m[j]);
            vxy[(r, k)] = -x[i] * y[j] / nf;
        }
        for j in 0..d {
            for i in 0..d {
                vxx[(i + j * d, k)] = -x[i] * x[j] / nf;
            }
        }
    }

    let (delta_l, delta_t, ridge) =
        ws.first_order_change(opts.hessian, &idx_l, &idx_t, &vyy, &vxy, &vxx)?;
    let total = u.component_mul(&delta_l).sum() + w.component_mul(&delta_t).sum();
    let fit_term = 0.5 * neg_loglik_l2(&stats, &model.lambda, &model.theta)?;
    let correction = -total / (2.0 * nf);
    Ok(LooklScore {
        score: fit_term + correction,
        fit_term,
        correction,
        ridge,
    })
}

/// Generalized approximate cross-validation for a model without covariates:
/// `½ l2(Λ̂) + (1/2n) Σ_k vec(Σ - S_k)ᵀ (Λ̂⊗Λ̂) vec(S^{(-k)} - S)`.
pub fn gacv_score(ds: &Dataset, model: &CggmModel) -> Result<f64> {
    if ds.d() != 0 || model.d() != 0 {
        return Err(Error::InvalidArgument(
            "generalized approximate CV applies to models without covariates".into(),
        ));
    }
    let n = ds.n();
    let nf = n as f64;
    let stats = sufficient_stats(ds);
    let lam = &model.lambda;
    let mut total = 0.0;
    for k in 0..n {
        let y = ds.y.row(k).transpose();
        let sk = &y * y.transpose();
        let diff = &model.sigma - &sk;
        let v = -&sk / nf;
        // vec(a)ᵀ (Λ⊗Λ) vec(b) = tr(aᵀ Λ b Λ)
        total += (diff.transpose() * lam * v * lam).trace();
    }
    Ok(0.5 * neg_loglik_l2(&stats, lam, &model.theta)? + total / (2.0 * nf))
}

/// `n·l2 + log(n)·(ξ(Λ)/2 + ξ(Θ))`, with `ξ(Λ)` the number of nonzero
/// off-diagonal entries (both triangles) and `ξ(Θ)` the nonzero entries.
pub fn bic_score(model: &CggmModel, stats: &SufficientStats) -> Result<f64> {
    let n = stats.n as f64;
    let (nl, nt) = model.nonzero_counts();
    let fit = n * neg_loglik_l2(stats, &model.lambda, &model.theta)?;
    Ok(fit + n.ln() * (nl as f64 / 2.0 + nt as f64))
}

/// Negative log-likelihood of one observation up to constants,
/// `½ l2(S_k; Λ, Θ)`.
pub fn observation_loss(model: &CggmModel, x: &[f64], y: &[f64]) -> f64 {
    let p = model.p();
    let d = model.d();
    let mut logdet = 0.0;
    if let Some(chol) = cholesky(&model.lambda) {
        logdet = crate::linalg::log_det_from_cholesky(&chol);
    }
    // y'Λy + 2x'Θy + x'ΘΣΘ'x
    let mut quad = 0.0;
    for i in 0..p {
        for j in 0..p {
            quad += y[i] * model.lambda[(i, j)] * y[j];
        }
    }
    let mut tx = vec![0.0; p]; // Θᵀx
    for j in 0..p {
        for i in 0..d {
            tx[j] += model.theta[(i, j)] * x[i];
        }
    }
    for j in 0..p {
        quad += 2.0 * tx[j] * y[j];
    }
    for i in 0..p {
        for j in 0..p {
            quad += tx[i] * model.sigma[(i, j)] * tx[j];
        }
    }
    0.5 * (-logdet + quad)
}

/// How the statistics of a training subset are scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldOutScaling {
    /// Sums over the retained rows divided by the full sample size, the
    /// convention the closed-form score linearizes around.
    #[default]
    FullSample,
    /// Ordinary averages over the retained rows.
    Retained,
}

fn held_out_loss(
    ds: &Dataset,
    folds: &[Vec<usize>],
    lambda2: f64,
    lambda3: f64,
    solver: &SolverOptions,
    warm: Option<&CggmModel>,
    scaling: HoldOutScaling,
) -> Result<f64> {
    let n = ds.n();
    let per_fold: Vec<Result<Vec<(usize, f64)>>> = folds
        .par_iter()
        .enumerate()
        .map(|(fi, fold)| {
            if fold.is_empty() {
                return Err(Error::InvalidArgument(format!("fold {fi} is empty")));
            }
            let mut held = vec![false; n];
            for &i in fold {
                held[i] = true;
            }
            let keep: Vec<usize> = (0..n).filter(|&i| !held[i]).collect();
            let train = ds.select_rows(&keep);
            let mut stats = sufficient_stats(&train);
            if scaling == HoldOutScaling::FullSample {
                let f = keep.len() as f64 / n as f64;
                stats.sxx *= f;
                stats.syy *= f;
                stats.sxy *= f;
            }
            let mut opts = solver.clone();
            if let Some(m) = warm {
                opts.init = Init::Warm {
                    lambda: m.lambda.clone(),
                    theta: m.theta.clone(),
                };
            }
            let model = fit_cggm(&stats, lambda2, lambda3, &opts)
                .map_err(|e| e.with_context(format!("held-out fit for fold {fi}")))?;
            Ok(fold
                .iter()
                .map(|&i| {
                    let x: Vec<f64> = ds.x.row(i).iter().copied().collect();
                    let y: Vec<f64> = ds.y.row(i).iter().copied().collect();
                    (i, observation_loss(&model, &x, &y))
                })
                .collect())
        })
        .collect();
    // summed in observation order so the result does not depend on how
    // rows were grouped into folds
    let mut losses = vec![f64::NAN; n];
    for f in per_fold {
        for (i, l) in f? {
            losses[i] = l;
        }
    }
    Ok(losses.iter().sum::<f64>() / n as f64)
}

/// Brute-force leave-one-out score: refits on each `n - 1` subset and
/// averages the held-out per-observation loss. When `warm` is given every
/// refit starts from it.
pub fn loocv_oracle(
    ds: &Dataset,
    lambda2: f64,
    lambda3: f64,
    solver: &SolverOptions,
    warm: Option<&CggmModel>,
    scaling: HoldOutScaling,
) -> Result<f64> {
    let folds: Vec<Vec<usize>> = (0..ds.n()).map(|k| vec![k]).collect();
    held_out_loss(ds, &folds, lambda2, lambda3, solver, warm, scaling)
}

/// Splits `0..n` into `k` near-equal blocks after a seeded shuffle.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!(
            "number of folds must be in 2..={n}, got {k}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (pos, i) in idx.into_iter().enumerate() {
        folds[pos * k / n].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// k-fold cross-validated per-observation loss.
#[allow(clippy::too_many_arguments)]
pub fn kfold_cv_score(
    ds: &Dataset,
    lambda2: f64,
    lambda3: f64,
    k: usize,
    seed: u64,
    solver: &SolverOptions,
    warm: Option<&CggmModel>,
    scaling: HoldOutScaling,
) -> Result<f64> {
    let folds = fold_assignment(ds.n(), k, seed)?;
    held_out_loss(ds, &folds, lambda2, lambda3, solver, warm, scaling)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Lookl,
    Bic,
    Kfold,
    LoocvOracle,
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lookl" => Ok(Criterion::Lookl),
            "bic" => Ok(Criterion::Bic),
            "cv" | "kfold" => Ok(Criterion::Kfold),
            "loocv" | "loocv_oracle" => Ok(Criterion::LoocvOracle),
            other => Err(Error::InvalidArgument(format!(
                "unknown criterion '{other}' (expected lookl, bic, cv or loocv)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuningOptions {
    pub solver: SolverOptions,
    pub folds: usize,
    pub seed: u64,
    pub lookl: LooklOptions,
    pub kfold_scaling: HoldOutScaling,
}

impl Default for TuningOptions {
    fn default() -> Self {
        TuningOptions {
            solver: SolverOptions::default(),
            folds: 5,
            seed: 0,
            lookl: LooklOptions::default(),
            kfold_scaling: HoldOutScaling::Retained,
        }
    }
}

/// Candidate penalty pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub points: Vec<(f64, f64)>,
}

impl Grid {
    /// Every pair from the two value lists, `λ2` varying slowest.
    pub fn product(lambda2: &[f64], lambda3: &[f64]) -> Self {
        let mut points = Vec::with_capacity(lambda2.len() * lambda3.len());
        for &a in lambda2 {
            for &b in lambda3 {
                points.push((a, b));
            }
        }
        Grid { points }
    }

    /// `k` log-spaced values per block over `[0.01, 1]·‖gradient at the
    /// diagonal model‖_∞`. A block with no free entries gets the single
    /// value 0.
    pub fn default_for(stats: &SufficientStats, k: usize) -> Self {
        let p = stats.p();
        let mut max_l = 0.0_f64;
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    max_l = max_l.max(stats.syy[(i, j)].abs());
                }
            }
        }
        let max_t = 2.0 * crate::linalg::max_abs(&stats.sxy);
        let axis = |top: f64| {
            if top <= 0.0 || k == 0 {
                vec![0.0]
            } else {
                log_spaced(0.01 * top, top, k)
            }
        };
        Grid::product(&axis(max_l), &axis(max_t))
    }
}

/// `k` values from `hi` down to `lo`, evenly spaced on the log scale.
pub fn log_spaced(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![hi];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..k)
        .map(|i| (b + (a - b) * i as f64 / (k - 1) as f64).exp())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub criterion: Criterion,
    pub grid: Vec<(f64, f64)>,
    pub scores: Vec<f64>,
    pub chosen: (f64, f64),
    pub chosen_index: usize,
}

impl SelectionResult {
    /// Tab-separated `lambda2 lambda3 score` lines with the chosen row
    /// marked.
    pub fn table(&self) -> String {
        let mut out = String::from("lambda2\tlambda3\tscore\n");
        for (i, ((a, b), s)) in self.grid.iter().zip(&self.scores).enumerate() {
            let mark = if i == self.chosen_index { "\t*" } else { "" };
            out.push_str(&format!("{a:.6e}\t{b:.6e}\t{s:.10e}{mark}\n"));
        }
        out
    }
}

fn key(p: (f64, f64)) -> (u64, u64) {
    (p.0.to_bits(), p.1.to_bits())
}

/// Scores every grid point and returns the minimizer. Fits are warm-started
/// along the grid sorted by decreasing `(λ2, λ3)`; repeated points reuse the
/// first evaluation.
pub fn grid_select(
    ds: &Dataset,
    grid: &Grid,
    criterion: Criterion,
    opts: &TuningOptions,
) -> Result<SelectionResult> {
    let (result, _) = grid_select_with_models(ds, grid, criterion, opts)?;
    Ok(result)
}

/// As [`grid_select`], also returning the full-data fit at the chosen point.
pub fn grid_select_with_models(
    ds: &Dataset,
    grid: &Grid,
    criterion: Criterion,
    opts: &TuningOptions,
) -> Result<(SelectionResult, CggmModel)> {
    if grid.points.is_empty() {
        return Err(Error::InvalidArgument("empty tuning grid".into()));
    }
    for &(a, b) in &grid.points {
        if !(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid point ({a}, {b}) is not a pair of finite non-negative values"
            )));
        }
    }
    let stats = sufficient_stats(ds);
    let mut order: Vec<usize> = (0..grid.points.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (grid.points[i], grid.points[j]);
        b.0.total_cmp(&a.0)
            .then(b.1.total_cmp(&a.1))
            .then(i.cmp(&j))
    });
    let mut cache: std::collections::HashMap<(u64, u64), (f64, usize)> =
        std::collections::HashMap::new();
    let mut scores = vec![f64::NAN; grid.points.len()];
    let mut models: Vec<Option<CggmModel>> = vec![None; grid.points.len()];
    let mut prev: Option<CggmModel> = None;
    for &i in &order {
        let pt = grid.points[i];
        if let Some(&(s, first)) = cache.get(&key(pt)) {
            scores[i] = s;
            models[i] = models[first].clone();
            continue;
        }
        let mut solver = opts.solver.clone();
        if let Some(m) = &prev {
            solver.init = Init::Warm {
                lambda: m.lambda.clone(),
                theta: m.theta.clone(),
            };
        }
        let ctx = || format!("grid point (λ2={}, λ3={})", pt.0, pt.1);
        let model = fit_cggm(&stats, pt.0, pt.1, &solver).map_err(|e| e.with_context(ctx()))?;
        let score = match criterion {
            Criterion::Bic => bic_score(&model, &stats),
            Criterion::Lookl => lookl_score(ds, &model, opts.lookl).map(|s| s.score),
            Criterion::Kfold => kfold_cv_score(
                ds,
                pt.0,
                pt.1,
                opts.folds,
                opts.seed,
                &opts.solver,
                Some(&model),
                opts.kfold_scaling,
            ),
            Criterion::LoocvOracle => loocv_oracle(
                ds,
                pt.0,
                pt.1,
                &opts.solver,
                Some(&model),
                HoldOutScaling::FullSample,
            ),
        }
        .map_err(|e| e.with_context(ctx()))?;
        scores[i] = score;
        cache.insert(key(pt), (score, i));
        models[i] = Some(model.clone());
        prev = Some(model);
    }
    let mut best = 0;
    for i in 1..scores.len() {
        let (s, b) = (scores[i], scores[best]);
        let better = s < b
            || (s == b && {
                let (pi, pb) = (grid.points[i], grid.points[best]);
                pi.0 > pb.0 || (pi.0 == pb.0 && pi.1 > pb.1)
            })
            || (b.is_nan() && !s.is_nan());
        if better {
            best = i;
        }
    }
    let model = models[best].take().expect("every grid point is fitted");
    Ok((
        SelectionResult {
            criterion,
            grid: grid.points.clone(),
            scores,
            chosen: grid.points[best],
            chosen_index: best,
        },
        model,
    ))
}
