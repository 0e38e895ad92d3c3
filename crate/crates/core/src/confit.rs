//! Constrained least-squares fit of `A_d` for short or ill-conditioned data.
//!
//! Minimizes `‖Σ₁ − A_d M‖_F²` (with `M` the same de-regularized moment the
//! closed-form estimator would invert) subject to `‖A_d − I‖₂ ≤ 1 − 1e-9` and
//! equal row-block sums `A_d (1_N ⊗ I_n)`.
//!
//! Both solvers start from `I`. The objective is nearly flat along the weak
//! directions of `Σ₀`, so the start decides where in that valley we land.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::{estimator_operands, CovariancePair, EstimationError, Pattern};
use crate::linalg;

/// Radius actually enforced for the open unit ball around `I`.
pub const BALL_RADIUS: f64 = 1.0 - 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfitError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite moment matrices")]
    NonFinite,
    #[error(transparent)]
    Estimation(#[from] EstimationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// ADMM splitting the block-constrained least squares from the ball.
    #[default]
    Admm,
    /// Gradient step, then projection onto the intersection.
    ProjectedGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstrainedFitConfig {
    pub solver: Solver,
    pub max_iters: usize,
    /// Gradient step; `None` uses `1 / (2 λ_max(M Mᵀ))`.
    pub step_size: Option<f64>,
    /// Relative primal and dual residual (ADMM) or relative iterate change
    /// (projected gradient) below which the fit is declared converged.
    pub tolerance: f64,
    /// Weight of the block-spread penalty added to the gradient step.
    pub equality_penalty: f64,
    /// Dykstra rounds per projection onto the intersection.
    pub projection_rounds: usize,
    /// Initial ADMM penalty; `None` means `2 tr(M Mᵀ) / (Nn ‖Σ₁‖_F²)`.
    /// Adapted by residual balancing either way.
    pub rho: Option<f64>,
}

impl Default for ConstrainedFitConfig {
    fn default() -> Self {
        Self {
            solver: Solver::Admm,
            max_iters: 3000,
            step_size: None,
            tolerance: 1e-10,
            equality_penalty: 1.0,
            projection_rounds: 50,
            rho: None,
        }
    }
}

impl ConstrainedFitConfig {
    fn validate(&self) -> Result<(), ConfitError> {
        let ok = self.max_iters > 0
            && self.tolerance > 0.0
            && self.equality_penalty >= 0.0
            && self.projection_rounds > 0
            && self.step_size.map_or(true, |s| s > 0.0 && s.is_finite())
            && self.rho.map_or(true, |r| r > 0.0 && r.is_finite());
        if ok {
            Ok(())
        } else {
            Err(ConfitError::Config(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedFit {
    pub ad: DMatrix<f64>,
    /// Objective normalized by `‖Σ₁‖_F²`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `‖Â_d − I‖₂` of the returned iterate.
    pub ball_norm: f64,
    /// Largest deviation between row-block sums of the returned iterate.
    pub block_spread: f64,
}

/// `I + clip(M − I)`: singular values of `M − I` capped at `radius`.
pub fn project_spectral_ball(m: &DMatrix<f64>, radius: f64) -> DMatrix<f64> {
    let n = m.nrows();
    let id = DMatrix::<f64>::identity(n, m.ncols());
    let d = m - &id;
    let f = linalg::svd(&d);
    if f.s.iter().all(|&s| s <= radius) {
        return m.clone();
    }
    let clipped = f.s.map(|s| s.min(radius));
    id + f.u * DMatrix::from_diagonal(&clipped) * f.v.transpose()
}

/// Equalize the `N` row-block sums at their mean with the smallest
/// Frobenius change: each block in row `i` moves by `(S̄ − S_i)/N`.
pub fn project_block_equality(m: &DMatrix<f64>, n_blocks: usize, n: usize) -> DMatrix<f64> {
    let sums = linalg::row_block_sums(m, n_blocks, n);
    let mean = sums.iter().fold(DMatrix::zeros(n, n), |acc, s| acc + s) / n_blocks as f64;
    let mut out = m.clone();
    for (i, s) in sums.iter().enumerate() {
        let shift = (&mean - s) / n_blocks as f64;
        for j in 0..n_blocks {
            let mut blk = out.view_mut((i * n, j * n), (n, n));
            blk += &shift;
        }
    }
    out
}

/// Dykstra's alternating projection onto ball ∩ block-equality, finished by
/// an exact retraction: the block-equality subspace is linear and contains
/// `I`, so shrinking `M − I` after the affine projection keeps both.
pub fn project_feasible(m: &DMatrix<f64>, n_blocks: usize, n: usize, rounds: usize) -> DMatrix<f64> {
    let mut x = m.clone();
    let mut p = DMatrix::zeros(m.nrows(), m.ncols());
    let mut q = DMatrix::zeros(m.nrows(), m.ncols());
    for _ in 0..rounds {
        let y = project_spectral_ball(&(&x + &p), BALL_RADIUS);
        p = &x + &p - &y;
        let x_next = project_block_equality(&(&y + &q), n_blocks, n);
        q = &y + &q - &x_next;
        x = x_next;
        let ball_violation =
            (linalg::spectral_norm(&(&x - DMatrix::<f64>::identity(x.nrows(), x.ncols()))) - BALL_RADIUS).max(0.0);
        if ball_violation < 1e-9 && linalg::row_block_spread(&x, n_blocks, n) < 1e-9 {
            break;
        }
    }
    let id = DMatrix::<f64>::identity(x.nrows(), x.ncols());
    let d = project_block_equality(&x, n_blocks, n) - &id;
    let norm = linalg::spectral_norm(&d);
    // a hair inside so rounding in `I + D` cannot push the norm past the radius
    let target = BALL_RADIUS - 1e-12;
    if norm > target {
        id + d * (target / norm)
    } else {
        id + d
    }
}

fn objective(x: &DMatrix<f64>, s1: &DMatrix<f64>, m: &DMatrix<f64>, scale: f64) -> f64 {
    (s1 - x * m).norm_squared() * scale
}

/// Constrained least-squares fit of `A_d`; every return value is feasible.
pub fn fit_ad_constrained(
    cov: &CovariancePair,
    gamma: &DMatrix<f64>,
    pattern: Pattern,
    n_blocks: usize,
    cfg: &ConstrainedFitConfig,
) -> Result<ConstrainedFit, ConfitError> {
    cfg.validate()?;
    if cov.sigma0.iter().chain(cov.sigma1.iter()).any(|v| !v.is_finite()) {
        return Err(ConfitError::NonFinite);
    }
    let n = gamma.nrows();
    let (s1, m) = estimator_operands(cov, pattern, gamma, n_blocks)?;
    let problem = Problem { scale: 1.0 / s1.norm_squared().max(f64::MIN_POSITIVE), s1, m, n_blocks, n };
    let fit = match cfg.solver {
        Solver::Admm => admm(&problem, cfg),
        Solver::ProjectedGradient => projected_gradient(&problem, cfg),
    };
    Ok(fit)
}

struct Problem {
    s1: DMatrix<f64>,
    m: DMatrix<f64>,
    scale: f64,
    n_blocks: usize,
    n: usize,
}

impl Problem {
    fn objective(&self, x: &DMatrix<f64>) -> f64 {
        objective(x, &self.s1, &self.m, self.scale)
    }

    fn project(&self, x: &DMatrix<f64>, cfg: &ConstrainedFitConfig) -> DMatrix<f64> {
        project_feasible(x, self.n_blocks, self.n, cfg.projection_rounds)
    }

    /// `I`: feasible, and along the directions the moments barely excite
    /// the iterates stay near it instead of absorbing noise.
    fn initial_point(&self) -> DMatrix<f64> {
        DMatrix::identity(self.m.nrows(), self.m.nrows())
    }

    fn finish(&self, x: DMatrix<f64>, iterations: usize, converged: bool) -> ConstrainedFit {
        let dim = x.nrows();
        let ball_norm = linalg::spectral_norm(&(&x - DMatrix::<f64>::identity(dim, dim)));
        let block_spread = linalg::row_block_spread(&x, self.n_blocks, self.n);
        ConstrainedFit { objective: self.objective(&x), ad: x, iterations, converged, ball_norm, block_spread }
    }
}

/// ADMM on `min f(X) s.t. X ∈ block-equality, Z ∈ ball, X = Z`.
///
/// The `X` step is the exact block-constrained least-squares minimizer (all
/// rows share one Hessian, so the equality multipliers have a closed form);
/// the `Z` step is the spectral-ball clip. The penalty follows the usual
/// residual-balancing rule.
fn admm(p: &Problem, cfg: &ConstrainedFitConfig) -> ConstrainedFit {
    let dim = p.m.nrows();
    let (n_blocks, n) = (p.n_blocks, p.n);
    let id = DMatrix::<f64>::identity(dim, dim);
    let start = p.initial_point();
    let hess = &p.m * p.m.transpose() * (2.0 * p.scale);
    let lin = &p.s1 * p.m.transpose() * (2.0 * p.scale);
    let e = linalg::block_ones(n_blocks, n);
    let mut rho = cfg.rho.unwrap_or_else(|| (hess.trace() / dim as f64).max(1e-8));

    let factor = |rho: f64| {
        let h = &hess + &id * rho;
        let chol = h.cholesky().expect("Hessian plus ρI is positive definite");
        let he = chol.solve(&e);
        let g = e.transpose() * &he;
        let g_inv = g.try_inverse().expect("EᵀH⁻¹E is positive definite");
        (chol, he, g_inv)
    };
    let (mut chol, mut he, mut g_inv) = factor(rho);

    let mut z = start.clone();
    let mut u = DMatrix::<f64>::zeros(dim, dim);
    let mut x = start.clone();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let rhs = &lin + (&z - &u) * rho;
        x = chol.solve(&rhs.transpose()).transpose();
        let y = &x * &e;
        let mut c = DMatrix::<f64>::zeros(n, n);
        for i in 0..n_blocks {
            c += y.rows(i * n, n);
        }
        c /= n_blocks as f64;
        let corr_t = he.transpose();
        for i in 0..n_blocks {
            let delta = (y.rows(i * n, n) - &c) * &g_inv * &corr_t;
            let mut rows = x.rows_mut(i * n, n);
            rows -= delta;
        }
        let z_prev = z;
        z = project_spectral_ball(&(&x + &u), BALL_RADIUS);
        u += &x - &z;

        let r = (&x - &z).norm();
        let s = rho * (&z - &z_prev).norm();
        let eps = cfg.tolerance * x.norm().max(z.norm()).max(1.0);
        if r <= eps && s <= eps {
            converged = true;
            break;
        }
        let new_rho = if r > 10.0 * s {
            rho * 2.0
        } else if s > 10.0 * r {
            rho / 2.0
        } else {
            rho
        };
        if new_rho != rho {
            u *= rho / new_rho;
            rho = new_rho;
            (chol, he, g_inv) = factor(rho);
        }
    }
    let candidate = p.project(&x, cfg);
    let best = if p.objective(&candidate) <= p.objective(&start) { candidate } else { start };
    p.finish(best, iterations, converged)
}

/// Projected gradient with backtracking; accepted iterates never increase
/// the objective.
fn projected_gradient(p: &Problem, cfg: &ConstrainedFitConfig) -> ConstrainedFit {
    let (s1, m, scale) = (&p.s1, &p.m, p.scale);
    let (n_blocks, n) = (p.n_blocks, p.n);
    let mmt = m * m.transpose();
    let lmax = linalg::spectral_norm(&mmt);
    let base_step = cfg.step_size.unwrap_or(if lmax > 0.0 { 0.5 / lmax } else { 1.0 });
    let project = |x: &DMatrix<f64>| p.project(x, cfg);
    let mut x = p.initial_point();
    let mut f = p.objective(&x);

    let s1mt = s1 * m.transpose();
    let mut converged = false;
    let mut iterations = 0;
    let mut step = base_step;
    while iterations < cfg.max_iters {
        iterations += 1;
        let mut grad = (&x * &mmt - &s1mt) * 2.0;
        if cfg.equality_penalty > 0.0 {
            let sums = linalg::row_block_sums(&x, n_blocks, n);
            let mean = sums.iter().fold(DMatrix::zeros(n, n), |acc, s| acc + s) / n_blocks as f64;
            let weight = 2.0 * cfg.equality_penalty / scale;
            for (i, s) in sums.iter().enumerate() {
                let g = (s - &mean) * weight;
                for j in 0..n_blocks {
                    let mut blk = grad.view_mut((i * n, j * n), (n, n));
                    blk += &g;
                }
            }
        }
        let mut accepted = None;
        for _ in 0..30 {
            let cand = project(&(&x - &grad * step));
            let fc = p.objective(&cand);
            if fc <= f {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            converged = true;
            break;
        };
        let change = (&cand - &x).norm();
        x = cand;
        f = fc;
        step = (step * 2.0).min(base_step);
        if change <= cfg.tolerance * x.norm().max(1.0) {
            converged = true;
            break;
        }
    }
    p.finish(x, iterations, converged)
}
