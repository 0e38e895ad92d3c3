//! Continuous closed loop from the sampled one: `A_c = log(A_d)/τ` by the
//! Mercator series `log M = Σ (−1)^{k+1} (M − I)^k / k`.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg;

pub const MAX_TERMS: usize = 10_000;
const TERM_TOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatlogError {
    #[error("series diverges: ‖M − I‖₂ = {norm:.6} ≥ 1")]
    DivergentSeries { norm: f64 },
    #[error("series did not converge after {terms} terms (residual {residual:.3e})")]
    NoConvergence { terms: usize, residual: f64 },
    #[error("matrix must be square, got {0:?}")]
    NotSquare((usize, usize)),
    #[error("sampling period must be positive and finite, got {0}")]
    InvalidTau(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogResult {
    pub log: DMatrix<f64>,
    pub terms_used: usize,
    /// `‖exp(log M) − M‖_F`.
    pub residual: f64,
    pub converged: bool,
    /// `‖M − I‖₂`.
    pub distance_from_identity: f64,
}

pub fn matrix_log_series(m: &DMatrix<f64>) -> Result<LogResult, MatlogError> {
    if !m.is_square() {
        return Err(MatlogError::NotSquare(m.shape()));
    }
    let n = m.nrows();
    let e = m - DMatrix::<f64>::identity(n, n);
    let distance_from_identity = linalg::spectral_norm(&e);
    if !(distance_from_identity < 1.0) {
        return Err(MatlogError::DivergentSeries { norm: distance_from_identity });
    }
    let mut power = e.clone();
    let mut sum = DMatrix::zeros(n, n);
    let mut terms_used = 0;
    let mut decayed = false;
    for k in 1..=MAX_TERMS {
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        let term = &power * (sign / k as f64);
        sum += &term;
        terms_used = k;
        if term.norm() <= TERM_TOL * sum.norm() {
            decayed = true;
            break;
        }
        power = &power * &e;
    }
    let residual = (linalg::expm(&sum) - m).norm();
    let converged = residual <= 1e-6 * m.norm().max(1.0);
    if !decayed && !converged {
        return Err(MatlogError::NoConvergence { terms: terms_used, residual });
    }
    Ok(LogResult { log: sum, terms_used, residual, converged, distance_from_identity })
}

/// `τ_max = ln 2 / ‖A_c‖₂`; infinite for `A_c = 0`.
pub fn sampling_bound(ac: &DMatrix<f64>) -> f64 {
    let norm = linalg::spectral_norm(ac);
    if norm == 0.0 {
        f64::INFINITY
    } else {
        std::f64::consts::LN_2 / norm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcRecovery {
    pub ac: DMatrix<f64>,
    pub log: LogResult,
    /// `ln 2 / ‖Â_c‖₂` of the recovered matrix.
    pub tau_bound: f64,
    /// Set when `τ ≥ ln 2 / ‖Â_c‖₂`, i.e. uniqueness is not guaranteed.
    pub uniqueness_warning: bool,
}

/// `Â_c = log(Â_d) / τ`.
pub fn recover_ac(ad: &DMatrix<f64>, tau: f64) -> Result<AcRecovery, MatlogError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(MatlogError::InvalidTau(tau));
    }
    let log = matrix_log_series(ad)?;
    let ac = &log.log / tau;
    let tau_bound = sampling_bound(&ac);
    Ok(AcRecovery { ac, log, tau_bound, uniqueness_warning: tau >= tau_bound })
}

/// Worst-case `‖Â_c − A_c‖₂` when `‖Â_d − A_d‖₂ = δ` and `‖A_d − I‖₂ = δ̃`:
/// `δ / (τ (1 − δ̃ − δ))`, defined only for `δ < 1 − δ̃`.
pub fn perturbation_bound(delta: f64, delta_tilde: f64, tau: f64) -> Option<f64> {
    let slack = 1.0 - delta_tilde - delta;
    (slack > 0.0 && tau > 0.0).then(|| delta / (tau * slack))
}
