//! Sparse conditional Gaussian graphical model for `Y | X`.
//!
//! The conditional density is parameterized by a precision `Λ` (p×p) and a
//! cross block `Θ` (d×p):
//!
//! `f(y | x) ∝ |Λ|^{1/2} exp(-½ yᵀΛy - xᵀΘy - ½ xᵀΘΛ⁻¹Θᵀx)`,
//!
//! and the penalized objective minimized by [`fit_cggm`] is
//!
//! `l2(Λ, Θ) + λ2‖Λ‖_{1,off} + λ3‖Θ‖_1`,
//! `l2 = -log|Λ| + tr(S_yyΛ + 2S_xyᵀΘ + Λ⁻¹ΘᵀS_xxΘ)`.

use serde::{Deserialize, Serialize};

use crate::data::SufficientStats;
use crate::error::{Error, Result};
use crate::linalg::{
    cholesky, condition_number_sym, inverse_pd, log_det_from_cholesky, symmetrize_in_place, Mat,
};

/// Threshold below which an estimated entry is treated as zero when reading
/// off graph structure or counting parameters.
pub const ZERO_TOL: f64 = 1e-10;

/// A fit whose objective stops changing is reported as converged when its
/// KKT residual is within this factor of the tolerance.
const STAGNATION_KKT_FACTOR: f64 = 100.0;

fn check_dims(stats: &SufficientStats, lambda: &Mat, theta: &Mat) -> Result<()> {
    let (d, p) = (stats.d(), stats.p());
    if lambda.shape() != (p, p) {
        return Err(Error::DimensionMismatch(format!(
            "Λ is {}x{}, expected {p}x{p}",
            lambda.nrows(),
            lambda.ncols()
        )));
    }
    if theta.shape() != (d, p) {
        return Err(Error::DimensionMismatch(format!(
            "Θ is {}x{}, expected {d}x{p}",
            theta.nrows(),
            theta.ncols()
        )));
    }
    Ok(())
}

fn trace_product(a: &Mat, b: &Mat) -> f64 {
    // tr(aᵀ b)
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Smooth part `l2(Λ, Θ)` of the objective. Fails when `Λ` is not positive
/// definite.
pub fn neg_loglik_l2(stats: &SufficientStats, lambda: &Mat, theta: &Mat) -> Result<f64> {
    check_dims(stats, lambda, theta)?;
    let chol = cholesky(lambda).ok_or(Error::NotPositiveDefinite("Λ"))?;
    let mut val = -log_det_from_cholesky(&chol) + trace_product(&stats.syy, lambda);
    if theta.nrows() > 0 {
        val += 2.0 * trace_product(&stats.sxy, theta);
        // tr(Λ⁻¹ΘᵀS_xxΘ) = tr((S_xxΘ)ᵀ (ΘΛ⁻¹))
        let sxx_theta = &stats.sxx * theta;
        let theta_sigma = chol.solve(&theta.transpose()).transpose();
        val += trace_product(&sxx_theta, &theta_sigma);
    }
    Ok(val)
}

/// Penalty `λ2‖Λ‖_{1,off} + λ3‖Θ‖_1`.
pub fn penalty(lambda: &Mat, theta: &Mat, lambda2: f64, lambda3: f64) -> f64 {
    lambda2 * offdiag_l1(lambda) + lambda3 * theta.iter().map(|v| v.abs()).sum::<f64>()
}

fn offdiag_l1(m: &Mat) -> f64 {
    let mut s = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if i != j {
                s += m[(i, j)].abs();
            }
        }
    }
    s
}

/// Full penalized objective.
pub fn objective(
    stats: &SufficientStats,
    lambda: &Mat,
    theta: &Mat,
    lambda2: f64,
    lambda3: f64,
) -> Result<f64> {
    Ok(neg_loglik_l2(stats, lambda, theta)? + penalty(lambda, theta, lambda2, lambda3))
}

/// `∇_Θ l2 = 2S_xy + 2S_xxΘΣ`.
pub fn grad_theta(stats: &SufficientStats, theta: &Mat, sigma: &Mat) -> Mat {
    (&stats.sxy + &stats.sxx * theta * sigma) * 2.0
}

/// Gradient of the surrogate `h_t` at `Λ_t`:
/// `S_yy + ΣΘᵀS_xxΘΣ + 2ΣΘᵀS_xy - Σ`, symmetrized.
pub fn grad_h_lambda(stats: &SufficientStats, theta: &Mat, sigma: &Mat) -> Mat {
    let st = sigma * theta.transpose();
    let mut g = &stats.syy + &st * &stats.sxx * st.transpose() + &st * &stats.sxy * 2.0 - sigma;
    symmetrize_in_place(&mut g);
    g
}

/// Exact partial gradient `∂l2/∂Λ = S_yy - Σ - ΣΘᵀS_xxΘΣ`.
pub fn grad_lambda(stats: &SufficientStats, theta: &Mat, sigma: &Mat) -> Mat {
    let mut g = &stats.syy - sigma - curvature_k(stats, theta, sigma);
    symmetrize_in_place(&mut g);
    g
}

/// `K = ΣΘᵀS_xxΘΣ`, the extra curvature of `tr(Λ⁻¹ΘᵀS_xxΘ)` in `Λ`.
fn curvature_k(stats: &SufficientStats, theta: &Mat, sigma: &Mat) -> Mat {
    let st = sigma * theta.transpose();
    let mut k = &st * &stats.sxx * st.transpose();
    symmetrize_in_place(&mut k);
    k
}

/// Surrogate `h_t(Λ) = -log|Λ| + tr(S_yyΛ + 2S_xyᵀΘ_tΣ_tΛ + Σ_tΛΣ_tΘ_tᵀS_xxΘ_t)`.
pub fn surrogate_h(
    stats: &SufficientStats,
    lambda: &Mat,
    theta_t: &Mat,
    sigma_t: &Mat,
) -> Result<f64> {
    let chol = cholesky(lambda).ok_or(Error::NotPositiveDefinite("Λ"))?;
    let mut v = -log_det_from_cholesky(&chol) + trace_product(&stats.syy, lambda);
    if theta_t.nrows() > 0 {
        let a = theta_t * sigma_t; // d×p
        v += 2.0 * trace_product(&(stats.sxy.transpose() * &a), &lambda.transpose());
        let m = theta_t.transpose() * &stats.sxx * theta_t;
        v += (sigma_t * lambda * sigma_t * m).trace();
    }
    Ok(v)
}

/// Soft-thresholding operator `sign(x)·max(|x| - t, 0)`.
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Coordinates updated in one outer iteration. `lambda` holds pairs `(i, j)`
/// with `i ≤ j` standing for both `(i, j)` and `(j, i)`; `theta` is ordered
/// row-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActiveSets {
    pub lambda: Vec<(usize, usize)>,
    pub theta: Vec<(usize, usize)>,
}

impl ActiveSets {
    pub fn contains_lambda(&self, i: usize, j: usize) -> bool {
        let key = (i.min(j), i.max(j));
        self.lambda.binary_search(&key).is_ok()
    }

    pub fn contains_theta(&self, i: usize, j: usize) -> bool {
        self.theta.binary_search(&(i, j)).is_ok()
    }

    /// Every coordinate of both blocks.
    pub fn full(d: usize, p: usize) -> Self {
        let mut lambda = Vec::new();
        for i in 0..p {
            for j in i..p {
                lambda.push((i, j));
            }
        }
        let mut theta = Vec::new();
        for i in 0..d {
            for j in 0..p {
                theta.push((i, j));
            }
        }
        ActiveSets { lambda, theta }
    }
}

/// Active sets from given gradients: nonzero entries, entries whose gradient
/// exceeds the penalty level strictly, and the whole diagonal of `Λ`.
pub fn active_sets_from_gradients(
    grad_lambda: &Mat,
    grad_theta: &Mat,
    lambda: &Mat,
    theta: &Mat,
    lambda2: f64,
    lambda3: f64,
) -> ActiveSets {
    let p = lambda.nrows();
    let mut ls = Vec::new();
    for i in 0..p {
        for j in i..p {
            if i == j || lambda[(i, j)] != 0.0 || grad_lambda[(i, j)].abs() > lambda2 {
                ls.push((i, j));
            }
        }
    }
    let mut ts = Vec::new();
    for i in 0..theta.nrows() {
        for j in 0..theta.ncols() {
            if theta[(i, j)] != 0.0 || grad_theta[(i, j)].abs() > lambda3 {
                ts.push((i, j));
            }
        }
    }
    ActiveSets {
        lambda: ls,
        theta: ts,
    }
}

/// Active sets using `∇_Θ l2` and the surrogate gradient `∇h`.
pub fn compute_active_sets(
    stats: &SufficientStats,
    lambda: &Mat,
    theta: &Mat,
    lambda2: f64,
    lambda3: f64,
) -> Result<ActiveSets> {
    check_dims(stats, lambda, theta)?;
    let sigma = inverse_pd(lambda)?;
    let gt = grad_theta(stats, theta, &sigma);
    let gl = grad_h_lambda(stats, theta, &sigma);
    Ok(active_sets_from_gradients(
        &gl, &gt, lambda, theta, lambda2, lambda3,
    ))
}

/// Result of one Gauss–Seidel sweep over the active `Θ` coordinates.
#[derive(Clone, Debug)]
pub struct ThetaPass {
    pub theta: Mat,
    pub max_change: f64,
    /// Rows of `Θ` held at zero because the matching covariate has zero
    /// second moment.
    pub frozen_rows: Vec<usize>,
}

/// One coordinate-descent sweep over `active.theta` with `Λ` (through
/// `Σ = Λ⁻¹`) held fixed.
pub fn update_theta_pass(
    stats: &SufficientStats,
    sigma: &Mat,
    theta: &Mat,
    active: &ActiveSets,
    lambda3: f64,
) -> ThetaPass {
    let mut theta = theta.clone();
    let mut g = &stats.sxx * &theta * sigma; // S_xxΘΣ, d×p
    let p = sigma.nrows();
    let mut max_change = 0.0_f64;
    let mut frozen_rows = Vec::new();
    for &(i, j) in &active.theta {
        let sxx_ii = stats.sxx[(i, i)];
        let old = theta[(i, j)];
        let new = if sxx_ii <= 0.0 {
            if frozen_rows.last() != Some(&i) {
                frozen_rows.push(i);
            }
            0.0
        } else {
            let a = 2.0 * sigma[(j, j)] * sxx_ii;
            let b = 2.0 * stats.sxy[(i, j)] + 2.0 * g[(i, j)];
            soft_threshold(old - b / a, lambda3 / a)
        };
        let delta = new - old;
        if delta != 0.0 {
            theta[(i, j)] = new;
            for r in 0..g.nrows() {
                let s = delta * stats.sxx[(r, i)];
                if s != 0.0 {
                    for c in 0..p {
                        g[(r, c)] += s * sigma[(j, c)];
                    }
                }
            }
            max_change = max_change.max(delta.abs());
        }
    }
    ThetaPass {
        theta,
        max_change,
        frozen_rows,
    }
}

/// Coordinate descent for the `Λ` Newton direction
///
/// `min_D tr(G D) + ½ tr(ΣDΣD) + tr(DΣDK) + λ2‖Λ + D‖_{1,off}`
///
/// over the active coordinates, with `K = 0` when `curvature` is `None`.
#[allow(clippy::too_many_arguments)]
fn newton_direction_cd(
    grad: &Mat,
    sigma: &Mat,
    curvature: Option<&Mat>,
    lambda_t: &Mat,
    active: &ActiveSets,
    lambda2: f64,
    max_sweeps: usize,
    tol: f64,
) -> Mat {
    let p = sigma.nrows();
    let mut dir = Mat::zeros(p, p);
    let mut u = Mat::zeros(p, p); // DΣ
    let mut v = Mat::zeros(p, p); // DK
    let dot_row_col = |a: &Mat, i: usize, b: &Mat, j: usize| -> f64 {
        let mut s = 0.0;
        for k in 0..p {
            s += a[(i, k)] * b[(k, j)];
        }
        s
    };
    for _ in 0..max_sweeps {
        let mut max_step = 0.0_f64;
        let mut scale = 0.0_f64;
        for &(i, j) in &active.lambda {
            let sdsd = dot_row_col(sigma, i, &u, j); // (ΣDΣ)_ij
            let mu = if i == j {
                let mut a = sigma[(i, i)] * sigma[(i, i)];
                let mut b = grad[(i, i)] + sdsd;
                if let Some(k) = curvature {
                    a += 2.0 * sigma[(i, i)] * k[(i, i)];
                    b += 2.0 * dot_row_col(sigma, i, &v, i);
                }
                -b / a
            } else {
                let mut a = sigma[(i, j)] * sigma[(i, j)] + sigma[(i, i)] * sigma[(j, j)];
                let mut b = grad[(i, j)] + sdsd;
                if let Some(k) = curvature {
                    a += sigma[(j, j)] * k[(i, i)]
                        + sigma[(i, i)] * k[(j, j)]
                        + 2.0 * sigma[(i, j)] * k[(i, j)];
                    b += dot_row_col(sigma, i, &v, j) + dot_row_col(sigma, j, &v, i);
                }
                let c = lambda_t[(i, j)] + dir[(i, j)];
                -c + soft_threshold(c - b / a, lambda2 / a)
            };
            if mu == 0.0 || !mu.is_finite() {
                continue;
            }
            dir[(i, j)] += mu;
            for c in 0..p {
                u[(i, c)] += mu * sigma[(j, c)];
            }
            if let Some(k) = curvature {
                for c in 0..p {
                    v[(i, c)] += mu * k[(j, c)];
                }
            }
            if i != j {
                dir[(j, i)] += mu;
                for c in 0..p {
                    u[(j, c)] += mu * sigma[(i, c)];
                }
                if let Some(k) = curvature {
                    for c in 0..p {
                        v[(j, c)] += mu * k[(i, c)];
                    }
                }
            }
            max_step = max_step.max(mu.abs());
            scale = scale.max(dir[(i, j)].abs());
        }
        if max_step <= tol * scale.max(1.0) {
            break;
        }
    }
    symmetrize_in_place(&mut dir);
    dir
}

/// Coordinate descent for the joint proximal Newton direction of
/// `l2 + λ2‖Λ‖_{1,off} + λ3‖Θ‖_1` in `(Λ, Θ)`. The quadratic model is
///
/// `tr(G_Λ D_Λ) + tr(G_Θᵀ D_Θ) + ½tr(ΣD_ΛΣD_Λ) + tr(D_ΛΣD_ΛK)
///  - 2tr(ΣD_ΛΣΘᵀS_xxD_Θ) + tr(ΣD_ΘᵀS_xxD_Θ)`.
#[allow(clippy::too_many_arguments)]
fn joint_newton_direction(
    stats: &SufficientStats,
    lambda_t: &Mat,
    theta_t: &Mat,
    sigma: &Mat,
    active: &ActiveSets,
    lambda2: f64,
    lambda3: f64,
    max_sweeps: usize,
    tol: f64,
) -> (Mat, Mat) {
    let p = sigma.nrows();
    let d = theta_t.nrows();
    let gl = grad_lambda(stats, theta_t, sigma);
    let gt = grad_theta(stats, theta_t, sigma);
    let k = curvature_k(stats, theta_t, sigma);
    let r = sigma * theta_t.transpose() * &stats.sxx; // ΣΘᵀS_xx, p×d
    let mut dl = Mat::zeros(p, p);
    let mut dt = Mat::zeros(d, p);
    let mut u = Mat::zeros(p, p); // D_ΛΣ
    let mut v = Mat::zeros(p, p); // D_ΛK
    let mut yv = Mat::zeros(p, d); // D_ΛR
    let mut z = Mat::zeros(d, p); // D_ΘΣ
    let mut w = Mat::zeros(d, p); // S_xxD_ΘΣ
    let row_col = |a: &Mat, i: usize, b: &Mat, j: usize| -> f64 {
        let mut s = 0.0;
        for t in 0..a.ncols() {
            s += a[(i, t)] * b[(t, j)];
        }
        s
    };
    for _ in 0..max_sweeps {
        let mut max_step = 0.0_f64;
        let mut scale = 0.0_f64;
        for &(i, j) in &active.lambda {
            let sds = row_col(sigma, i, &u, j);
            let mu = if i == j {
                let a = sigma[(i, i)] * sigma[(i, i)] + 2.0 * sigma[(i, i)] * k[(i, i)];
                let b =
                    gl[(i, i)] + sds + 2.0 * row_col(sigma, i, &v, i) - 2.0 * row_col(&r, i, &z, i);
                -b / a
            } else {
                let a = sigma[(i, j)] * sigma[(i, j)]
                    + sigma[(i, i)] * sigma[(j, j)]
                    + sigma[(j, j)] * k[(i, i)]
                    + sigma[(i, i)] * k[(j, j)]
                    + 2.0 * sigma[(i, j)] * k[(i, j)];
                let b = gl[(i, j)] + sds + row_col(sigma, i, &v, j) + row_col(sigma, j, &v, i)
                    - row_col(&r, i, &z, j)
                    - row_col(&r, j, &z, i);
                let c = lambda_t[(i, j)] + dl[(i, j)];
                -c + soft_threshold(c - b / a, lambda2 / a)
            };
            if mu == 0.0 || !mu.is_finite() {
                continue;
            }
            let pairs: &[(usize, usize)] = if i == j { &[(i, j)] } else { &[(i, j), (j, i)] };
            for &(a_, b_) in pairs {
                dl[(a_, b_)] += mu;
                for c in 0..p {
                    u[(a_, c)] += mu * sigma[(b_, c)];
                    v[(a_, c)] += mu * k[(b_, c)];
                }
                for c in 0..d {
                    yv[(a_, c)] += mu * r[(b_, c)];
                }
            }
            max_step = max_step.max(mu.abs());
            scale = scale.max(lambda_t[(i, j)].abs() + dl[(i, j)].abs());
        }
        for &(i, j) in &active.theta {
            let sxx_ii = stats.sxx[(i, i)];
            if sxx_ii <= 0.0 {
                continue;
            }
            let a = 2.0 * sxx_ii * sigma[(j, j)];
            let b = gt[(i, j)] + 2.0 * w[(i, j)] - 2.0 * row_col(sigma, j, &yv, i);
            let c = theta_t[(i, j)] + dt[(i, j)];
            let mu = -c + soft_threshold(c - b / a, lambda3 / a);
            if mu == 0.0 || !mu.is_finite() {
                continue;
            }
            dt[(i, j)] += mu;
            for col in 0..p {
                z[(i, col)] += mu * sigma[(j, col)];
            }
            for row in 0..d {
                let s = mu * stats.sxx[(row, i)];
                if s != 0.0 {
                    for col in 0..p {
                        w[(row, col)] += s * sigma[(j, col)];
                    }
                }
            }
            max_step = max_step.max(mu.abs());
            scale = scale.max(c.abs() + mu.abs());
        }
        if max_step <= tol * scale.max(1.0) {
            break;
        }
    }
    symmetrize_in_place(&mut dl);
    (dl, dt)
}

/// Backtracking on the full objective along a joint direction.
#[allow(clippy::too_many_arguments)]
fn joint_armijo(
    stats: &SufficientStats,
    lambda_t: &Mat,
    theta_t: &Mat,
    sigma: &Mat,
    dl: &Mat,
    dt: &Mat,
    lambda2: f64,
    lambda3: f64,
    f0: f64,
    params: ArmijoParams,
) -> Option<(f64, Mat, Mat, f64)> {
    let gl = grad_lambda(stats, theta_t, sigma);
    let gt = grad_theta(stats, theta_t, sigma);
    let pen0 = penalty(lambda_t, theta_t, lambda2, lambda3);
    let delta = trace_product(&gl, dl)
        + trace_product(&gt, dt)
        + penalty(&(lambda_t + dl), &(theta_t + dt), lambda2, lambda3)
        - pen0;
    let mut alpha = 1.0;
    for _ in 0..=params.max_backtracks {
        let l = lambda_t + dl * alpha;
        let t = theta_t + dt * alpha;
        if let Ok(s) = neg_loglik_l2(stats, &l, &t) {
            let val = s + penalty(&l, &t, lambda2, lambda3);
            if val.is_finite() && val <= f0 + alpha * params.sigma * delta {
                return Some((alpha, l, t, val));
            }
        }
        alpha *= params.beta;
    }
    None
}

/// Newton direction for the surrogate `h_t`: gradient `∇h`, Hessian `Σ⊗Σ`,
/// `sweeps` coordinate-descent passes over `active.lambda`.
pub fn lambda_newton_direction(
    stats: &SufficientStats,
    lambda_t: &Mat,
    theta_t: &Mat,
    active: &ActiveSets,
    lambda2: f64,
    sweeps: usize,
) -> Result<Mat> {
    check_dims(stats, lambda_t, theta_t)?;
    let sigma = inverse_pd(lambda_t)?;
    let grad = grad_h_lambda(stats, theta_t, &sigma);
    Ok(newton_direction_cd(
        &grad, &sigma, None, lambda_t, active, lambda2, sweeps, 0.0,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Accepted,
    /// No step length passed the test; `Λ` is unchanged.
    Rejected,
}

#[derive(Clone, Debug)]
pub struct ArmijoOutcome {
    pub alpha: f64,
    pub lambda: Mat,
    pub objective: f64,
    pub backtracks: usize,
    pub status: StepStatus,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmijoParams {
    pub beta: f64,
    pub sigma: f64,
    pub max_backtracks: usize,
}

impl Default for ArmijoParams {
    fn default() -> Self {
        ArmijoParams {
            beta: 0.5,
            sigma: 0.25,
            max_backtracks: 30,
        }
    }
}

/// Backtracking over `α = β^k` for a penalized objective `smooth(Λ) +
/// λ2‖Λ‖_{1,off}`, requiring positive definiteness and sufficient decrease
/// `F(Λ+αD) ≤ F(Λ) + ασ(tr(GD) + λ2‖Λ+D‖ - λ2‖Λ‖)`.
#[allow(clippy::too_many_arguments)]
fn armijo_search<F>(
    smooth: F,
    f0: f64,
    grad: &Mat,
    lambda_t: &Mat,
    dir: &Mat,
    lambda2: f64,
    params: ArmijoParams,
) -> ArmijoOutcome
where
    F: Fn(&Mat) -> Option<f64>,
{
    let pen0 = lambda2 * offdiag_l1(lambda_t);
    let full = lambda_t + dir;
    let delta = trace_product(grad, dir) + lambda2 * offdiag_l1(&full) - pen0;
    let start = f0 + pen0;
    let mut alpha = 1.0;
    for k in 0..=params.max_backtracks {
        let cand = lambda_t + dir * alpha;
        if let Some(s) = smooth(&cand) {
            let val = s + lambda2 * offdiag_l1(&cand);
            if val.is_finite() && val <= start + alpha * params.sigma * delta {
                return ArmijoOutcome {
                    alpha,
                    lambda: cand,
                    objective: val,
                    backtracks: k,
                    status: StepStatus::Accepted,
                };
            }
        }
        alpha *= params.beta;
    }
    ArmijoOutcome {
        alpha: 0.0,
        lambda: lambda_t.clone(),
        objective: start,
        backtracks: params.max_backtracks,
        status: StepStatus::Rejected,
    }
}

/// Armijo line search on `p_t(Λ) = h_t(Λ) + λ2‖Λ‖_{1,off}` along `direction`.
pub fn armijo_step(
    stats: &SufficientStats,
    lambda_t: &Mat,
    direction: &Mat,
    theta_t: &Mat,
    lambda2: f64,
    params: ArmijoParams,
) -> Result<ArmijoOutcome> {
    check_dims(stats, lambda_t, theta_t)?;
    let sigma = inverse_pd(lambda_t)?;
    let grad = grad_h_lambda(stats, theta_t, &sigma);
    let f0 = surrogate_h(stats, lambda_t, theta_t, &sigma)?;
    Ok(armijo_search(
        |l| surrogate_h(stats, l, theta_t, &sigma).ok(),
        f0,
        &grad,
        lambda_t,
        direction,
        lambda2,
        params,
    ))
}

/// Which model of the `Λ` subproblem drives the Newton step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaStep {
    /// Exact gradient and Hessian of `l2(·, Θ_t)`, line search on the
    /// penalized objective. Fixed points satisfy the optimality conditions.
    #[default]
    Exact,
    /// The first-order surrogate `h_t` with Hessian `Σ⊗Σ` and line search on
    /// `h_t + λ2‖Λ‖_{1,off}`. When `λ3 > 0` its fixed points generally differ
    /// from the minimizer.
    Surrogate,
}

/// Outer iteration scheme.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Alternate a coordinate-descent pass over `Θ` with a proximal Newton
    /// step in `Λ`.
    Backfitting,
    /// One proximal Newton step in `(Λ, Θ)` jointly per iteration, using the
    /// cross curvature between the blocks.
    #[default]
    Joint,
}

/// Starting point of the outer iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Init {
    /// The unpenalized estimate when `n > max(p, d)`, the covariances are
    /// well conditioned and it has the lower penalized objective; `(I, 0)`
    /// otherwise.
    #[default]
    Auto,
    IdentityZero,
    Mle,
    Warm {
        lambda: Mat,
        theta: Mat,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    pub max_outer_iters: usize,
    pub max_theta_sweeps: usize,
    pub max_newton_sweeps: usize,
    pub tol_rel_obj: f64,
    pub tol_kkt: f64,
    /// Relative step size below which inner coordinate descent stops.
    pub tol_inner: f64,
    /// The inner tolerance is loosened to `inner_forcing · KKT residual`
    /// while far from the optimum.
    pub inner_forcing: f64,
    pub armijo: ArmijoParams,
    pub init: Init,
    pub strategy: Strategy,
    pub lambda_step: LambdaStep,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_outer_iters: 100,
            max_theta_sweeps: 100,
            max_newton_sweeps: 1000,
            tol_rel_obj: 1e-6,
            tol_kkt: 1e-7,
            tol_inner: 1e-9,
            inner_forcing: 1e-4,
            armijo: ArmijoParams::default(),
            init: Init::Auto,
            strategy: Strategy::Joint,
            lambda_step: LambdaStep::Exact,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub kkt_residual: f64,
    pub frozen_theta_rows: Vec<usize>,
    pub rejected_steps: usize,
    pub init: String,
    pub message: String,
}

/// Fitted conditional model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CggmModelRepr", into = "CggmModelRepr")]
pub struct CggmModel {
    pub lambda: Mat,
    pub theta: Mat,
    /// `Λ⁻¹`, recomputed from `lambda` on load.
    pub sigma: Mat,
    pub lambda2: f64,
    pub lambda3: f64,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub diagnostics: FitDiagnostics,
}

#[derive(Serialize, Deserialize)]
struct CggmModelRepr {
    #[serde(with = "crate::dense")]
    lambda: Mat,
    #[serde(with = "crate::dense")]
    theta: Mat,
    lambda2: f64,
    lambda3: f64,
    objective_trace: Vec<f64>,
    converged: bool,
    iterations: usize,
    diagnostics: FitDiagnostics,
}

impl TryFrom<CggmModelRepr> for CggmModel {
    type Error = Error;

    fn try_from(r: CggmModelRepr) -> Result<Self> {
        CggmModel::from_parts(r.lambda, r.theta, r.lambda2, r.lambda3).map(|mut m| {
            m.objective_trace = r.objective_trace;
            m.converged = r.converged;
            m.iterations = r.iterations;
            m.diagnostics = r.diagnostics;
            m
        })
    }
}

impl From<CggmModel> for CggmModelRepr {
    fn from(m: CggmModel) -> Self {
        CggmModelRepr {
            lambda: m.lambda,
            theta: m.theta,
            lambda2: m.lambda2,
            lambda3: m.lambda3,
            objective_trace: m.objective_trace,
            converged: m.converged,
            iterations: m.iterations,
            diagnostics: m.diagnostics,
        }
    }
}

impl CggmModel {
    /// Wraps given parameters, validating shapes and positive definiteness.
    pub fn from_parts(lambda: Mat, theta: Mat, lambda2: f64, lambda3: f64) -> Result<Self> {
        if lambda.nrows() != lambda.ncols() {
            return Err(Error::DimensionMismatch("Λ must be square".into()));
        }
        if theta.ncols() != lambda.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "Θ has {} columns, Λ is {}x{}",
                theta.ncols(),
                lambda.nrows(),
                lambda.ncols()
            )));
        }
        if (&lambda - lambda.transpose()).amax() > 0.0 {
            return Err(Error::InvalidArgument("Λ must be symmetric".into()));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("Θ has non-finite entries".into()));
        }
        let sigma = inverse_pd(&lambda)?;
        Ok(CggmModel {
            lambda,
            theta,
            sigma,
            lambda2,
            lambda3,
            objective_trace: Vec::new(),
            converged: true,
            iterations: 0,
            diagnostics: FitDiagnostics::default(),
        })
    }

    pub fn d(&self) -> usize {
        self.theta.nrows()
    }

    pub fn p(&self) -> usize {
        self.lambda.nrows()
    }

    /// `M = ΘΛ⁻¹Θᵀ`, the quadratic form the conditional model contributes to
    /// the log density of `X`.
    pub fn m_hat(&self) -> Mat {
        let mut m = &self.theta * &self.sigma * self.theta.transpose();
        symmetrize_in_place(&mut m);
        m
    }

    /// Conditional mean `-ΣΘᵀx`.
    pub fn conditional_mean(&self, x: &[f64]) -> Vec<f64> {
        let xv = nalgebra::DVector::from_column_slice(x);
        let mu = -(&self.sigma * self.theta.transpose() * xv);
        mu.iter().copied().collect()
    }

    /// `log f(y | x)` including the normalizing constant.
    pub fn log_density(&self, x: &[f64], y: &[f64]) -> f64 {
        let p = self.p();
        let mu = self.conditional_mean(x);
        let r = nalgebra::DVector::from_iterator(p, y.iter().zip(&mu).map(|(a, b)| a - b));
        let quad = (r.transpose() * &self.lambda * &r)[(0, 0)];
        let logdet = crate::linalg::log_det_pd(&self.lambda).unwrap_or(f64::NAN);
        0.5 * logdet - 0.5 * quad - 0.5 * p as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    /// Number of nonzero off-diagonal entries of `Λ` (both triangles) and of
    /// `Θ`.
    pub fn nonzero_counts(&self) -> (usize, usize) {
        let p = self.p();
        let mut nl = 0;
        for i in 0..p {
            for j in 0..p {
                if i != j && self.lambda[(i, j)].abs() > ZERO_TOL {
                    nl += 1;
                }
            }
        }
        let nt = self.theta.iter().filter(|v| v.abs() > ZERO_TOL).count();
        (nl, nt)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Largest violation of the optimality conditions of the penalized
/// objective at `(Λ, Θ)`.
pub fn kkt_residual(
    stats: &SufficientStats,
    lambda: &Mat,
    theta: &Mat,
    lambda2: f64,
    lambda3: f64,
) -> Result<f64> {
    check_dims(stats, lambda, theta)?;
    let sigma = inverse_pd(lambda)?;
    let gl = grad_lambda(stats, theta, &sigma);
    let gt = grad_theta(stats, theta, &sigma);
    Ok(kkt_from_gradients(
        &gl, &gt, lambda, theta, lambda2, lambda3,
    ))
}

fn kkt_block(g: f64, x: f64, pen: f64) -> f64 {
    if x.abs() > 0.0 {
        (g + pen * x.signum()).abs()
    } else {
        (g.abs() - pen).max(0.0)
    }
}

fn kkt_from_gradients(
    gl: &Mat,
    gt: &Mat,
    lambda: &Mat,
    theta: &Mat,
    lambda2: f64,
    lambda3: f64,
) -> f64 {
    let mut r = 0.0_f64;
    let p = lambda.nrows();
    for i in 0..p {
        for j in 0..p {
            let v = if i == j {
                gl[(i, i)].abs()
            } else {
                kkt_block(gl[(i, j)], lambda[(i, j)], lambda2)
            };
            r = r.max(v);
        }
    }
    for (g, x) in gt.iter().zip(theta.iter()) {
        r = r.max(kkt_block(*g, *x, lambda3));
    }
    r
}

/// Unpenalized estimate `Λ̌ = (S_yy - S_xyᵀS_xx⁻¹S_xy)⁻¹`, `Θ̌ = -S_xx⁻¹S_xyΛ̌`
/// when both covariance blocks are well conditioned.
pub fn mle_estimate(stats: &SufficientStats) -> Result<(Mat, Mat)> {
    const MAX_COND: f64 = 1e10;
    let d = stats.d();
    let (schur, sxx_inv_sxy) = if d == 0 {
        (stats.syy.clone(), Mat::zeros(0, stats.p()))
    } else {
        if condition_number_sym(&stats.sxx) >= MAX_COND {
            return Err(Error::Singular("S_xx is ill-conditioned".into()));
        }
        let chol = cholesky(&stats.sxx).ok_or(Error::NotPositiveDefinite("S_xx"))?;
        let b = chol.solve(&stats.sxy);
        let mut s = &stats.syy - stats.sxy.transpose() * &b;
        symmetrize_in_place(&mut s);
        (s, b)
    };
    if condition_number_sym(&schur) >= MAX_COND {
        return Err(Error::Singular(
            "residual covariance is ill-conditioned".into(),
        ));
    }
    let lambda = inverse_pd(&schur)?;
    let theta = -(sxx_inv_sxy * &lambda);
    Ok((lambda, theta))
}

fn initial_point(
    stats: &SufficientStats,
    init: &Init,
    lambda2: f64,
    lambda3: f64,
) -> Result<(Mat, Mat, String)> {
    let (d, p) = (stats.d(), stats.p());
    let identity = || (Mat::identity(p, p), Mat::zeros(d, p));
    match init {
        Init::IdentityZero => {
            let (l, t) = identity();
            Ok((l, t, "identity".into()))
        }
        Init::Mle => {
            let (l, t) = mle_estimate(stats)?;
            Ok((l, t, "mle".into()))
        }
        Init::Warm { lambda, theta } => {
            check_dims(stats, lambda, theta)?;
            if cholesky(lambda).is_none() {
                return Err(Error::NotPositiveDefinite("warm-start Λ"));
            }
            Ok((lambda.clone(), theta.clone(), "warm".into()))
        }
        Init::Auto => {
            let (l0, t0) = identity();
            if stats.n > p.max(d) {
                if let Ok((l, t)) = mle_estimate(stats) {
                    let f_mle = objective(stats, &l, &t, lambda2, lambda3);
                    let f_id = objective(stats, &l0, &t0, lambda2, lambda3);
                    if let (Ok(a), Ok(b)) = (f_mle, f_id) {
                        if a <= b {
                            return Ok((l, t, "mle".into()));
                        }
                    }
                }
            }
            Ok((l0, t0, "identity".into()))
        }
    }
}

/// Minimizes `l2 + λ2‖Λ‖_{1,off} + λ3‖Θ‖_1` by alternating a coordinate-
/// descent pass over `Θ` with a proximal Newton step in `Λ`, both restricted
/// to active sets recomputed every outer iteration.
pub fn fit_cggm(
    stats: &SufficientStats,
    lambda2: f64,
    lambda3: f64,
    opts: &SolverOptions,
) -> Result<CggmModel> {
    if !(lambda2 >= 0.0 && lambda3 >= 0.0 && lambda2.is_finite() && lambda3.is_finite()) {
        return Err(Error::InvalidArgument(
            "penalties must be finite and non-negative".into(),
        ));
    }
    if stats.p() == 0 {
        return Err(Error::InvalidArgument("no response columns".into()));
    }
    let (mut lambda, mut theta, init_name) = initial_point(stats, &opts.init, lambda2, lambda3)?;
    let mut sigma = inverse_pd(&lambda)?;
    let mut obj =
        neg_loglik_l2(stats, &lambda, &theta)? + penalty(&lambda, &theta, lambda2, lambda3);
    let mut trace = vec![obj];
    let mut diag = FitDiagnostics {
        init: init_name,
        ..Default::default()
    };
    let mut converged = false;
    let mut iterations = 0;

    let kkt_now = |lambda: &Mat, theta: &Mat, sigma: &Mat| {
        let gl = grad_lambda(stats, theta, sigma);
        let gt = grad_theta(stats, theta, sigma);
        kkt_from_gradients(&gl, &gt, lambda, theta, lambda2, lambda3)
    };
    let mut kkt = kkt_now(&lambda, &theta, &sigma);
    if kkt <= opts.tol_kkt {
        converged = true;
    }

    while !converged && iterations < opts.max_outer_iters {
        iterations += 1;
        let gt = grad_theta(stats, &theta, &sigma);
        let gl = match (opts.strategy, opts.lambda_step) {
            (Strategy::Backfitting, LambdaStep::Surrogate) => grad_h_lambda(stats, &theta, &sigma),
            _ => grad_lambda(stats, &theta, &sigma),
        };
        let active = active_sets_from_gradients(&gl, &gt, &lambda, &theta, lambda2, lambda3);

        let lambda_changed = if opts.strategy == Strategy::Joint {
            let (dl, dt) = joint_newton_direction(
                stats,
                &lambda,
                &theta,
                &sigma,
                &active,
                lambda2,
                lambda3,
                opts.max_newton_sweeps,
                inner_tol(opts, kkt),
            );
            match joint_armijo(
                stats,
                &lambda,
                &theta,
                &sigma,
                &dl,
                &dt,
                lambda2,
                lambda3,
                obj,
                opts.armijo,
            ) {
                Some((_, l, t, _)) => {
                    lambda = l;
                    symmetrize_in_place(&mut lambda);
                    theta = t;
                    sigma = inverse_pd(&lambda)?;
                    true
                }
                None => {
                    diag.rejected_steps += 1;
                    false
                }
            }
        } else {
            // Θ block
            for _ in 0..opts.max_theta_sweeps {
                let pass = update_theta_pass(stats, &sigma, &theta, &active, lambda3);
                theta = pass.theta;
                for r in pass.frozen_rows {
                    if !diag.frozen_theta_rows.contains(&r) {
                        diag.frozen_theta_rows.push(r);
                    }
                }
                let scale = max_abs_or_one(&theta);
                if pass.max_change <= opts.tol_inner * scale {
                    break;
                }
            }
            let obj_theta =
                neg_loglik_l2(stats, &lambda, &theta)? + penalty(&lambda, &theta, lambda2, lambda3);

            // Λ block
            let outcome = match opts.lambda_step {
                LambdaStep::Exact => {
                    let grad = grad_lambda(stats, &theta, &sigma);
                    let k = curvature_k(stats, &theta, &sigma);
                    let dir = newton_direction_cd(
                        &grad,
                        &sigma,
                        Some(&k),
                        &lambda,
                        &active,
                        lambda2,
                        opts.max_newton_sweeps,
                        inner_tol(opts, kkt),
                    );
                    let f0 = neg_loglik_l2(stats, &lambda, &theta)?;
                    armijo_search(
                        |l| neg_loglik_l2(stats, l, &theta).ok(),
                        f0,
                        &grad,
                        &lambda,
                        &dir,
                        lambda2,
                        opts.armijo,
                    )
                }
                LambdaStep::Surrogate => {
                    let grad = grad_h_lambda(stats, &theta, &sigma);
                    let dir = newton_direction_cd(
                        &grad,
                        &sigma,
                        None,
                        &lambda,
                        &active,
                        lambda2,
                        opts.max_newton_sweeps,
                        inner_tol(opts, kkt),
                    );
                    let f0 = surrogate_h(stats, &lambda, &theta, &sigma)?;
                    let mut out = armijo_search(
                        |l| surrogate_h(stats, l, &theta, &sigma).ok(),
                        f0,
                        &grad,
                        &lambda,
                        &dir,
                        lambda2,
                        opts.armijo,
                    );
                    // the surrogate does not bound the true objective; refuse steps
                    // that increase it
                    if out.status == StepStatus::Accepted {
                        let cand = neg_loglik_l2(stats, &out.lambda, &theta)?
                            + penalty(&out.lambda, &theta, lambda2, lambda3);
                        if cand > obj_theta {
                            out.status = StepStatus::Rejected;
                            out.lambda = lambda.clone();
                            out.alpha = 0.0;
                        }
                    }
                    out
                }
            };
            if outcome.status == StepStatus::Rejected {
                diag.rejected_steps += 1;
            }
            let lambda_changed = outcome.status == StepStatus::Accepted && outcome.alpha > 0.0;
            if lambda_changed {
                lambda = outcome.lambda;
                symmetrize_in_place(&mut lambda);
                sigma = inverse_pd(&lambda)?;
            }
            lambda_changed
        };
        let new_obj =
            neg_loglik_l2(stats, &lambda, &theta)? + penalty(&lambda, &theta, lambda2, lambda3);
        trace.push(new_obj);
        let rel = (obj - new_obj).abs() / obj.abs().max(1.0);
        obj = new_obj;
        kkt = kkt_now(&lambda, &theta, &sigma);
        if kkt <= opts.tol_kkt && rel < opts.tol_rel_obj {
            converged = true;
        } else if rel == 0.0 || (opts.strategy == Strategy::Joint && !lambda_changed) {
            // round-off floor: nothing left to gain along Newton directions
            converged = kkt <= STAGNATION_KKT_FACTOR * opts.tol_kkt;
            diag.message = "objective stagnated".into();
            break;
        }
    }
    diag.kkt_residual = kkt;
    if !converged && diag.message.is_empty() {
        diag.message = format!("stopped after {iterations} iterations");
    }
    let mut model = CggmModel::from_parts(lambda, theta, lambda2, lambda3)?;
    model.objective_trace = trace;
    model.converged = converged;
    model.iterations = iterations;
    model.diagnostics = diag;
    Ok(model)
}

/// Inexact Newton: the inner solve only needs to be accurate relative to the
/// current distance from optimality.
fn inner_tol(opts: &SolverOptions, kkt: f64) -> f64 {
    opts.tol_inner.max(opts.inner_forcing * kkt)
}

fn max_abs_or_one(m: &Mat) -> f64 {
    crate::linalg::max_abs(m).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-1.0, 1.0), 0.0);
    }
}
