//! Growth-pattern classification and moment estimators for `A_d`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, kron, LinalgError};
use crate::sim::{stack_matrices, NoiseModel, Trajectory};

/// Inversions above this condition number are refused.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("window {window} must satisfy 0 < L < T = {horizon}")]
    InvalidWindow { window: usize, horizon: usize },
    #[error("need at least {needed} transitions, have {have}")]
    TooShort { needed: usize, have: usize },
    #[error("matrix to invert is ill-conditioned (cond = {cond:.3e}); use the constrained fit")]
    IllConditioned { cond: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Constant,
    LinearGrowth,
    Other,
}

impl std::str::FromStr for Pattern {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(Pattern::Constant),
            "linear" | "linear_growth" => Ok(Pattern::LinearGrowth),
            "other" => Ok(Pattern::Other),
            _ => Err(format!("unknown pattern `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternLabel {
    pub pattern: Pattern,
    pub eps1: f64,
    pub eps2: f64,
    pub threshold: f64,
}

/// Second moments of a trajectory (or of its first differences).
#[derive(Debug, Clone, PartialEq)]
pub struct CovariancePair {
    pub sigma0: DMatrix<f64>,
    pub sigma1: DMatrix<f64>,
    /// Normalizing sample count `T`.
    pub samples: usize,
}

/// `ε = 3√2 · max σ`.
pub fn default_threshold(noise: &NoiseModel) -> f64 {
    3.0 * std::f64::consts::SQRT_2 * noise.max_sigma()
}

/// `min(50, ⌊T/5⌋)`, clamped into `[1, T−1]`.
pub fn default_window(horizon: usize) -> usize {
    (horizon / 5).min(50).max(1).min(horizon.saturating_sub(1).max(1))
}

/// Mean first- and second-difference norms over the last `window` steps.
pub fn classify_pattern(traj: &Trajectory, window: usize, threshold: f64) -> Result<PatternLabel, EstimationError> {
    let t = traj.horizon();
    if window == 0 || window >= t {
        return Err(EstimationError::InvalidWindow { window, horizon: t });
    }
    let obs = traj.observations();
    let (mut e1, mut e2) = (0.0, 0.0);
    for k in (t - window)..t {
        let d1 = obs.column(k + 1) - obs.column(k);
        let d2 = obs.column(k + 1) - obs.column(k) * 2.0 + obs.column(k - 1);
        e1 += d1.norm();
        e2 += d2.norm();
    }
    let eps1 = e1 / window as f64;
    let eps2 = e2 / window as f64;
    let pattern = if eps1 <= threshold {
        Pattern::Constant
    } else if eps2 <= threshold {
        Pattern::LinearGrowth
    } else {
        Pattern::Other
    };
    Ok(PatternLabel { pattern, eps1, eps2, threshold })
}

/// `Σ₀ = Y⁻Y⁻ᵀ/T`, `Σ₁ = Y⁺Y⁻ᵀ/T`.
pub fn sample_covariances(traj: &Trajectory) -> CovariancePair {
    let (ym, yp) = stack_matrices(traj);
    let t = traj.horizon();
    let ymt = ym.transpose();
    let mut sigma0 = &ym * &ymt / t as f64;
    sigma0 = linalg::symmetrize(&sigma0);
    CovariancePair { sigma0, sigma1: &yp * ymt / t as f64, samples: t }
}

/// Same moments for `Δy(k) = y(k+1) − y(k)`, still normalized by `T`.
pub fn diff_covariances(traj: &Trajectory) -> Result<CovariancePair, EstimationError> {
    let t = traj.horizon();
    if t < 2 {
        return Err(EstimationError::TooShort { needed: 2, have: t });
    }
    let obs = traj.observations();
    let d = obs.columns(1, t) - obs.columns(0, t);
    let dm = d.columns(0, t - 1);
    let dp = d.columns(1, t - 1);
    let dmt = dm.transpose();
    let sigma0 = linalg::symmetrize(&(dm * &dmt / t as f64));
    Ok(CovariancePair { sigma0, sigma1: dp * dmt / t as f64, samples: t })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdEstimate {
    pub ad: DMatrix<f64>,
    /// 2-norm condition number of the inverted matrix.
    pub condition: f64,
    pub pattern: Pattern,
}

/// The matrix each branch inverts, and the left factor it multiplies.
pub fn estimator_operands(
    cov: &CovariancePair,
    pattern: Pattern,
    gamma: &DMatrix<f64>,
    n_nodes: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>), EstimationError> {
    let dim = cov.sigma0.nrows();
    if gamma.nrows() * n_nodes != dim || !gamma.is_square() {
        return Err(EstimationError::Dimension(format!("Γ is {:?}, N = {n_nodes}, Σ₀ is {dim}×{dim}", gamma.shape())));
    }
    let g = kron(&DMatrix::identity(n_nodes, n_nodes), gamma);
    Ok(match pattern {
        Pattern::Constant => (cov.sigma1.clone(), &cov.sigma0 - g),
        Pattern::Other => (cov.sigma1.clone(), cov.sigma0.clone()),
        Pattern::LinearGrowth => (&cov.sigma1 + &g, &cov.sigma0 - g * 2.0),
    })
}

/// Closed-form `Â_d` for the given pattern.
///
/// `cov` must come from [`diff_covariances`] for `LinearGrowth` and from
/// [`sample_covariances`] otherwise.
pub fn estimate_ad(
    cov: &CovariancePair,
    pattern: Pattern,
    gamma: &DMatrix<f64>,
    n_nodes: usize,
) -> Result<AdEstimate, EstimationError> {
    let (left, m) = estimator_operands(cov, pattern, gamma, n_nodes)?;
    let condition = linalg::cond2(&m);
    if !(condition < MAX_CONDITION) {
        return Err(EstimationError::IllConditioned { cond: condition });
    }
    let ad = linalg::solve_right(&left, &m)?;
    Ok(AdEstimate { ad, condition, pattern })
}

/// The `Γ = 0` estimator `Y⁺Y⁻ᵀ(Y⁻Y⁻ᵀ)⁻¹` computed as least squares on the
/// stacked data, so the condition that matters is that of `Y⁻`, not its
/// square. Converged noiseless runs need this: `Σ₀` is numerically singular
/// while the early samples still pin `A_d` down.
pub fn estimate_ad_least_squares(traj: &Trajectory, pattern: Pattern) -> Result<AdEstimate, EstimationError> {
    let (left, right) = match pattern {
        Pattern::LinearGrowth => {
            let t = traj.horizon();
            if t < 2 {
                return Err(EstimationError::TooShort { needed: 2, have: t });
            }
            let obs = traj.observations();
            let d = obs.columns(1, t) - obs.columns(0, t);
            (d.columns(0, t - 1).into_owned(), d.columns(1, t - 1).into_owned())
        }
        _ => stack_matrices(traj),
    };
    if left.ncols() < left.nrows() {
        return Err(EstimationError::TooShort { needed: left.nrows(), have: left.ncols() });
    }
    let svd = linalg::svd(&left);
    let smax = svd.s.max();
    let smin = svd.s.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition < MAX_CONDITION) {
        return Err(EstimationError::IllConditioned { cond: condition });
    }
    let inv_s = DMatrix::from_diagonal(&svd.s.map(|v| 1.0 / v));
    let ad = right * svd.v * inv_s * svd.u.transpose();
    Ok(AdEstimate { ad, condition, pattern })
}

/// Everything `infer ad` reports.
#[derive(Debug, Clone, PartialEq)]
pub struct AdInference {
    pub label: PatternLabel,
    pub pattern_used: Pattern,
    pub covariances: CovariancePair,
    pub estimate: Result<AdEstimate, EstimationError>,
}

/// Classify (unless a pattern is forced), build the matching moments and
/// apply the closed-form estimator (on the data directly when `Γ = 0`).
pub fn infer_ad(
    traj: &Trajectory,
    gamma: &DMatrix<f64>,
    forced: Option<Pattern>,
) -> Result<AdInference, EstimationError> {
    let window = default_window(traj.horizon());
    let sigma_max = gamma.diagonal().iter().map(|v| v.max(0.0).sqrt()).fold(0.0, f64::max);
    let threshold = 3.0 * std::f64::consts::SQRT_2 * sigma_max;
    let label = if traj.horizon() >= 2 {
        classify_pattern(traj, window, threshold)?
    } else {
        PatternLabel { pattern: Pattern::Other, eps1: f64::NAN, eps2: f64::NAN, threshold }
    };
    let pattern_used = forced.unwrap_or(label.pattern);
    let covariances = match pattern_used {
        Pattern::LinearGrowth => diff_covariances(traj)?,
        _ => sample_covariances(traj),
    };
    let estimate = if gamma.iter().all(|v| *v == 0.0) {
        estimate_ad_least_squares(traj, pattern_used)
    } else {
        estimate_ad(&covariances, pattern_used, gamma, traj.n_nodes)
    };
    Ok(AdInference { label, pattern_used, covariances, estimate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate, uniform_initial_state};
    use crate::system::{build_laplacian, reference_network, ClosedLoop};
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn traj_from(obs: DMatrix<f64>, n_nodes: usize, n: usize) -> Trajectory {
        Trajectory::from_observations(obs, 0.1, n_nodes, n, NoiseModel::noiseless(n), 0).unwrap()
    }

    #[test]
    fn threshold_values() {
        let g1 = NoiseModel::new(vec![2.0, 1.0, 0.2]).unwrap();
        assert_relative_eq!(default_threshold(&g1), 6.0 * 2f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(default_threshold(&g1), 8.485, epsilon = 1e-3);
        assert_relative_eq!(default_threshold(&g1.scaled(0.5)), 4.243, epsilon = 1e-3);
        assert_eq!(default_threshold(&NoiseModel::noiseless(3)), 0.0);
    }

    #[test]
    fn default_window_rule() {
        assert_eq!(default_window(1000), 50);
        assert_eq!(default_window(100), 20);
        assert_eq!(default_window(3), 1);
    }

    #[test]
    fn converged_reference_trajectory_is_constant() {
        let (g, sys) = reference_network();
        let cl = ClosedLoop::new(&sys, &build_laplacian(&g), 0.05).unwrap();
        let g4 = NoiseModel::new(vec![0.1, 0.05, 0.01]).unwrap();
        let x0 = uniform_initial_state(18, 0.0, 1000.0, 2);
        let traj = simulate(&cl, &x0, 1000, &g4, 2).unwrap();
        let label = classify_pattern(&traj, 50, default_threshold(&g4)).unwrap();
        assert_eq!(label.pattern, Pattern::Constant, "{label:?}");
    }

    #[test]
    fn linear_and_exponential_patterns() {
        let c = [0.5, -1.0];
        let lin = traj_from(DMatrix::from_fn(2, 40, |i, k| c[i] * k as f64), 1, 2);
        let label = classify_pattern(&lin, 10, 1.0).unwrap();
        assert_eq!(label.pattern, Pattern::LinearGrowth);
        assert_relative_eq!(label.eps1, (1.25f64).sqrt(), epsilon = 1e-12);
        assert!(label.eps2 < 1e-12);

        let exp = traj_from(DMatrix::from_fn(2, 40, |i, k| (i + 1) as f64 * 2f64.powi(k as i32)), 1, 2);
        assert_eq!(classify_pattern(&exp, 10, 1.0).unwrap().pattern, Pattern::Other);
        assert!(matches!(classify_pattern(&exp, 39, 1.0), Err(EstimationError::InvalidWindow { .. })));
    }

    #[test]
    fn single_column_covariances() {
        let obs = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let cov = sample_covariances(&traj_from(obs, 1, 2));
        assert_eq!(cov.sigma0, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        assert_eq!(cov.sigma1, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]));
    }

    #[test]
    fn diff_covariances_of_linear_ramp() {
        let c = DVector::from_vec(vec![1.0, 2.0]);
        let t = 10;
        let obs = DMatrix::from_fn(2, t + 1, |i, k| c[i] * k as f64);
        let cov = diff_covariances(&traj_from(obs, 1, 2)).unwrap();
        let expected = &c * c.transpose() * ((t - 1) as f64 / t as f64);
        assert!((&cov.sigma0 - &expected).norm() < 1e-12);
        assert!((&cov.sigma1 - &expected).norm() < 1e-12);

        let flat = traj_from(DMatrix::from_element(2, 5, 3.0), 1, 2);
        let cov = diff_covariances(&flat).unwrap();
        assert_eq!(cov.sigma0.norm() + cov.sigma1.norm(), 0.0);
        assert!(diff_covariances(&flat.truncated(1).unwrap()).is_err());
    }

    #[test]
    fn noiseless_moments_satisfy_transition() {
        let (g, sys) = reference_network();
        let cl = ClosedLoop::new(&sys, &build_laplacian(&g), 0.05).unwrap();
        let x0 = uniform_initial_state(18, 0.0, 1000.0, 4);
        let traj = simulate(&cl, &x0, 200, &NoiseModel::noiseless(3), 0).unwrap();
        let cov = sample_covariances(&traj);
        let resid = &cov.sigma1 - cl.ad() * &cov.sigma0;
        assert!(resid.norm() <= 1e-10 * cov.sigma1.norm());
        let min_eig = cov.sigma0.clone().symmetric_eigenvalues().min();
        assert!(min_eig >= -1e-10 * cov.sigma0.norm());
    }

    #[test]
    fn exact_limits_give_exact_ad() {
        // Σ₀ = X + I⊗Γ, Σ₁ = A_d X is the large-T structure with noise
        let n_nodes = 2;
        let ad = DMatrix::from_row_slice(
            4,
            4,
            &[0.9, 0.1, 0.0, 0.0, 0.0, 0.8, 0.1, 0.0, 0.05, 0.0, 0.9, 0.0, 0.0, 0.0, 0.1, 0.7],
        );
        let base = DMatrix::from_fn(4, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.5);
        let x = &base * base.transpose() + DMatrix::identity(4, 4);
        let gamma = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 0.1]));
        let cov = CovariancePair {
            sigma0: &x + kron(&DMatrix::identity(n_nodes, n_nodes), &gamma),
            sigma1: &ad * &x,
            samples: 1,
        };
        let est = estimate_ad(&cov, Pattern::Constant, &gamma, n_nodes).unwrap();
        assert!((est.ad - &ad).norm() < 1e-10);
    }

    #[test]
    fn exact_differenced_limits_give_exact_ad() {
        // Δy = Δx + υ(k+1) − υ(k): Σ_Δ0 = X + 2 I⊗Γ, Σ_Δ1 = A_d X − I⊗Γ
        let n_nodes = 2;
        let ad = DMatrix::from_row_slice(
            4,
            4,
            &[1.0, 0.05, 0.0, 0.0, 0.0, 0.9, 0.0, 0.1, 0.02, 0.0, 1.0, 0.0, 0.0, 0.1, 0.0, 0.8],
        );
        let base = DMatrix::from_fn(4, 4, |i, j| ((i * 5 + j * 2) % 7) as f64 - 3.0);
        let x = &base * base.transpose() + DMatrix::identity(4, 4);
        let gamma = DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.05]));
        let g = kron(&DMatrix::identity(n_nodes, n_nodes), &gamma);
        let cov = CovariancePair { sigma0: &x + &g * 2.0, sigma1: &ad * &x - g, samples: 1 };
        let est = estimate_ad(&cov, Pattern::LinearGrowth, &gamma, n_nodes).unwrap();
        assert!((est.ad - &ad).norm() < 1e-10);
    }

    #[test]
    fn ill_conditioned_inverse_is_refused() {
        let cov = CovariancePair {
            sigma0: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]),
            sigma1: DMatrix::identity(2, 2),
            samples: 1,
        };
        let err = estimate_ad(&cov, Pattern::Other, &DMatrix::zeros(1, 1), 2).unwrap_err();
        assert!(matches!(err, EstimationError::IllConditioned { cond } if cond > 1e13));
    }

    #[test]
    fn least_squares_path_survives_a_squared_condition_number() {
        // one persistent and one fast mode, excited very unevenly
        let ad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5]);
        let cl = ClosedLoop::from_ad(ad.clone(), 0.1, 1, 2).unwrap();
        let traj = simulate(&cl, &DVector::from_vec(vec![1e3, 1e-2]), 1000, &NoiseModel::noiseless(2), 0).unwrap();
        let gamma = DMatrix::zeros(2, 2);
        assert!(estimate_ad(&sample_covariances(&traj), Pattern::Other, &gamma, 1).is_err());
        let est = infer_ad(&traj, &gamma, Some(Pattern::Other)).unwrap().estimate.unwrap();
        assert!(est.condition < MAX_CONDITION);
        assert!(linalg::rel_frobenius(&est.ad, &ad) < 1e-6, "{}", linalg::rel_frobenius(&est.ad, &ad));
    }

    #[test]
    fn well_excited_noiseless_estimate_is_exact() {
        // an undamped rotation keeps Σ₀ well conditioned
        let th: f64 = 0.3;
        let ad = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let cl = ClosedLoop::from_ad(ad.clone(), 0.1, 1, 2).unwrap();
        let traj = simulate(&cl, &DVector::from_vec(vec![1.0, 0.0]), 50, &NoiseModel::noiseless(2), 0).unwrap();
        let est = estimate_ad(&sample_covariances(&traj), Pattern::Other, &DMatrix::zeros(2, 2), 1).unwrap();
        assert!(linalg::rel_frobenius(&est.ad, &ad) < 1e-8);
    }
}
