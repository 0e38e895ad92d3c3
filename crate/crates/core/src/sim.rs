//! Noisy sampled trajectories `y(k) = x(k) + υ(k)`, `x(k+1) = A_d x(k)`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::system::ClosedLoop;

/// Generator names recorded alongside every trajectory.
pub const RNG_ALGORITHM: &str = "ChaCha8";
pub const GAUSSIAN_ALGORITHM: &str = "ziggurat";

const OVERFLOW_LIMIT: f64 = 1e300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("state overflow at step {step} (|x| > 1e300)")]
    Overflow { step: usize },
    #[error("horizon must be at least one step")]
    EmptyHorizon,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid noise level: {0}")]
    InvalidNoise(String),
    #[error("non-finite initial state")]
    NonFiniteInitialState,
}

/// Per-dimension observation noise standard deviations, replicated over nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    sigma: Vec<f64>,
}

impl NoiseModel {
    pub fn new(sigma: Vec<f64>) -> Result<Self, SimError> {
        if let Some(s) = sigma.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(SimError::InvalidNoise(format!("σ = {s}")));
        }
        Ok(Self { sigma })
    }

    pub fn noiseless(state_dim: usize) -> Self {
        Self { sigma: vec![0.0; state_dim] }
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { sigma: self.sigma.iter().map(|s| s * factor).collect() }
    }

    /// `Γ = diag(σ²)`.
    pub fn gamma(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(self.sigma.len(), self.sigma.iter().map(|s| s * s)))
    }

    /// `I_N ⊗ Γ`.
    pub fn global_covariance(&self, n_nodes: usize) -> DMatrix<f64> {
        let n = self.sigma.len();
        DMatrix::from_fn(n_nodes * n, n_nodes * n, |i, j| if i == j { self.sigma[i % n].powi(2) } else { 0.0 })
    }

    pub fn max_sigma(&self) -> f64 {
        self.sigma.iter().cloned().fold(0.0, f64::max)
    }
}

/// Observations `y(0..=T)` stored column-wise in an `Nn × (T+1)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub tau: f64,
    pub n_nodes: usize,
    pub state_dim: usize,
    pub seed: u64,
    pub noise: NoiseModel,
    pub rng: String,
    pub gaussian: String,
    observations: DMatrix<f64>,
}

impl Trajectory {
    pub fn from_observations(
        observations: DMatrix<f64>,
        tau: f64,
        n_nodes: usize,
        state_dim: usize,
        noise: NoiseModel,
        seed: u64,
    ) -> Result<Self, SimError> {
        if observations.nrows() != n_nodes * state_dim {
            return Err(SimError::Dimension(format!(
                "{} rows for N = {n_nodes}, n = {state_dim}",
                observations.nrows()
            )));
        }
        if observations.ncols() < 2 {
            return Err(SimError::EmptyHorizon);
        }
        if noise.sigma().len() != state_dim {
            return Err(SimError::Dimension(format!(
                "{} noise levels for state dimension {state_dim}",
                noise.sigma().len()
            )));
        }
        if observations.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Dimension("non-finite observation".into()));
        }
        Ok(Self {
            tau,
            n_nodes,
            state_dim,
            seed,
            noise,
            rng: RNG_ALGORITHM.into(),
            gaussian: GAUSSIAN_ALGORITHM.into(),
            observations,
        })
    }

    /// Number of transitions `T`; there are `T + 1` observations.
    pub fn horizon(&self) -> usize {
        self.observations.ncols() - 1
    }

    pub fn dim(&self) -> usize {
        self.observations.nrows()
    }

    pub fn observations(&self) -> &DMatrix<f64> {
        &self.observations
    }

    pub fn y(&self, k: usize) -> DVector<f64> {
        self.observations.column(k).into_owned()
    }

    /// First `t + 1` observations.
    pub fn truncated(&self, t: usize) -> Result<Self, SimError> {
        if t < 1 || t > self.horizon() {
            return Err(SimError::EmptyHorizon);
        }
        let mut out = self.clone();
        out.observations = self.observations.columns(0, t + 1).into_owned();
        Ok(out)
    }
}

pub fn simulate(
    cl: &ClosedLoop,
    x0: &DVector<f64>,
    steps: usize,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Trajectory, SimError> {
    Ok(simulate_with_states(cl, x0, steps, noise, seed)?.0)
}

/// Same as [`simulate`] but also returns the noiseless states `x(0..=T)`.
pub fn simulate_with_states(
    cl: &ClosedLoop,
    x0: &DVector<f64>,
    steps: usize,
    noise: &NoiseModel,
    seed: u64,
) -> Result<(Trajectory, DMatrix<f64>), SimError> {
    if steps < 1 {
        return Err(SimError::EmptyHorizon);
    }
    let dim = cl.dim();
    if x0.len() != dim {
        return Err(SimError::Dimension(format!("x0 has length {}, expected {dim}", x0.len())));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(SimError::NonFiniteInitialState);
    }
    if noise.sigma().len() != cl.state_dim() {
        return Err(SimError::Dimension(format!(
            "{} noise levels for state dimension {}",
            noise.sigma().len(),
            cl.state_dim()
        )));
    }

    let ad = cl.ad();
    let n = cl.state_dim();
    let mut states = DMatrix::zeros(dim, steps + 1);
    states.set_column(0, x0);
    let mut x = x0.clone();
    for k in 1..=steps {
        x = ad * &x;
        if x.iter().any(|v| !v.is_finite() || v.abs() > OVERFLOW_LIMIT) {
            return Err(SimError::Overflow { step: k });
        }
        states.set_column(k, &x);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = states.clone();
    for k in 0..=steps {
        for i in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            obs[(i, k)] += noise.sigma()[i % n] * z;
        }
    }
    let traj = Trajectory::from_observations(obs, cl.tau(), cl.n_nodes(), n, noise.clone(), seed)?;
    Ok((traj, states))
}

/// `(Y⁻, Y⁺)`: observations `0..T` and `1..=T` as `Nn × T` matrices.
pub fn stack_matrices(traj: &Trajectory) -> (DMatrix<f64>, DMatrix<f64>) {
    let t = traj.horizon();
    let obs = traj.observations();
    (obs.columns(0, t).into_owned(), obs.columns(1, t).into_owned())
}

/// Uniform random initial state in `[lo, hi]`, drawn from its own seeded stream.
pub fn uniform_initial_state(dim: usize, lo: f64, hi: f64, seed: u64) -> DVector<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    DVector::from_iterator(dim, (0..dim).map(|_| rng.random_range(lo..=hi)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{build_laplacian, reference_network, ClosedLoop};

    fn reference(tau: f64) -> ClosedLoop {
        let (g, sys) = reference_network();
        ClosedLoop::new(&sys, &build_laplacian(&g), tau).unwrap()
    }

    #[test]
    fn noiseless_trajectory_is_power_recursion() {
        let cl = reference(0.05);
        let x0 = uniform_initial_state(18, 0.0, 1000.0, 3);
        let traj = simulate(&cl, &x0, 20, &NoiseModel::noiseless(3), 0).unwrap();
        let mut p = x0.clone();
        for k in 0..=20 {
            assert!((traj.y(k) - &p).norm() <= 1e-12 * p.norm().max(1.0));
            p = cl.ad() * p;
        }
    }

    #[test]
    fn identity_dynamics_give_constant_trajectory() {
        let cl = ClosedLoop::from_ad(DMatrix::identity(4, 4), 0.1, 2, 2).unwrap();
        let x0 = DVector::from_vec(vec![1.0, -2.0, 3.5, 0.25]);
        let traj = simulate(&cl, &x0, 5, &NoiseModel::noiseless(2), 9).unwrap();
        for k in 0..=5 {
            assert_eq!(traj.y(k), x0);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cl = reference(0.05);
        let x0 = uniform_initial_state(18, 0.0, 1000.0, 1);
        let noise = NoiseModel::new(vec![1.0, 0.5, 0.1]).unwrap();
        let a = simulate(&cl, &x0, 50, &noise, 42).unwrap();
        let b = simulate(&cl, &x0, 50, &noise, 42).unwrap();
        let c = simulate(&cl, &x0, 50, &noise, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.observations(), c.observations());
        assert_eq!(a.rng, "ChaCha8");
    }

    #[test]
    fn noise_covariance_and_whiteness() {
        let cl = reference(0.05);
        let x0 = uniform_initial_state(18, 0.0, 1000.0, 5);
        let noise = NoiseModel::new(vec![1.0, 0.5, 0.1]).unwrap();
        let (traj, states) = simulate_with_states(&cl, &x0, 10_000, &noise, 11).unwrap();
        let resid = traj.observations() - states;
        let t = resid.ncols() as f64;
        let cov = &resid * resid.transpose() / t;
        let target = noise.global_covariance(6);
        for i in 0..18 {
            let rel = (cov[(i, i)] - target[(i, i)]).abs() / target[(i, i)];
            assert!(rel < 0.05, "variance {i}: {} vs {}", cov[(i, i)], target[(i, i)]);
        }
        // lag-1 autocorrelation pooled over all coordinates (18 × 10⁴ samples)
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..18 {
            let s = noise.sigma()[i % 3].powi(2);
            for k in 0..resid.ncols() - 1 {
                num += resid[(i, k)] * resid[(i, k + 1)] / s;
                den += resid[(i, k)].powi(2) / s;
            }
        }
        assert!((num / den).abs() < 0.02);
    }

    #[test]
    fn reference_network_converges_noiselessly() {
        let cl = reference(0.05);
        let x0 = uniform_initial_state(18, 0.0, 1000.0, 8);
        let traj = simulate(&cl, &x0, 1000, &NoiseModel::noiseless(3), 0).unwrap();
        let y = traj.y(1000);
        for i in 0..6 {
            for j in 0..6 {
                let d = (y.rows(3 * i, 3) - y.rows(3 * j, 3)).norm();
                assert!(d < 1e-6 * x0.norm());
            }
        }
    }

    #[test]
    fn overflow_reports_step() {
        let cl = ClosedLoop::from_ad(DMatrix::identity(1, 1) * 1e200, 1.0, 1, 1).unwrap();
        let err = simulate(&cl, &DVector::from_vec(vec![1.0]), 5, &NoiseModel::noiseless(1), 0).unwrap_err();
        assert_eq!(err, SimError::Overflow { step: 2 });
    }

    #[test]
    fn stacking_keeps_index_order() {
        let obs = DMatrix::from_fn(2, 4, |i, k| (10 * k + i) as f64);
        let traj = Trajectory::from_observations(obs, 0.1, 1, 2, NoiseModel::noiseless(2), 0).unwrap();
        let (ym, yp) = stack_matrices(&traj);
        assert_eq!(ym.ncols(), 3);
        for k in 0..3 {
            assert_eq!(ym.column(k), traj.y(k).column(0));
            assert_eq!(yp.column(k), traj.y(k + 1).column(0));
        }
        let one = traj.truncated(1).unwrap();
        let (ym, yp) = stack_matrices(&one);
        assert_eq!((ym.ncols(), yp.ncols()), (1, 1));
        assert_eq!(yp[(1, 0)], 11.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cl = reference(0.05);
        let x0 = DVector::zeros(18);
        assert_eq!(simulate(&cl, &x0, 0, &NoiseModel::noiseless(3), 0), Err(SimError::EmptyHorizon));
        assert!(NoiseModel::new(vec![-1.0]).is_err());
        let mut bad = x0.clone();
        bad[0] = f64::NAN;
        assert_eq!(simulate(&cl, &bad, 3, &NoiseModel::noiseless(3), 0), Err(SimError::NonFiniteInitialState));
    }
}
