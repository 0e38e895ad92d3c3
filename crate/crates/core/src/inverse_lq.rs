//! Inverse LQ: find weights `(Q, R)` and the Riccati solution `P` under
//! which a Laplacian-coupled gain is optimal, plus a forward ARE solver used
//! to manufacture ground truth.
//!
//! With `Ã = I_N ⊗ A`, `B̃ = I_N ⊗ B` and `K̃ = L ⊗ K`, optimality means
//! `ÃᵀP + PÃ − P B̃K̃ + Q = 0`, i.e. `S vec P + vec Q = 0` with
//! `S = I ⊗ Ãᵀ + Ãᵀ ⊗ I − (B̃K̃)ᵀ ⊗ I`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, kron, LinalgError};
use crate::system::ClosedLoop;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InverseLqError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("R must be symmetric positive definite")]
    RNotPositiveDefinite,
    #[error("no stabilizing initial gain found")]
    NoStabilizingGain,
    #[error("Newton–Kleinman did not converge ({iterations} iterations, residual {residual:.3e})")]
    NewtonDiverged { iterations: usize, residual: f64 },
    #[error("K̃B̃ is zero; R cannot be recovered")]
    SingularGain,
    #[error("inverse problem infeasible: {0}")]
    Infeasible(String),
    #[error("nodal A must be Hurwitz for this design")]
    NotHurwitz,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    linalg::eigenvalues(m).iter().all(|z| z.re < 0.0)
}

/// Hurwitz with a stability margin that survives the Lyapunov solves.
fn is_robustly_hurwitz(m: &DMatrix<f64>) -> bool {
    let margin = 1e-6 * linalg::spectral_norm(m).max(1e-300);
    linalg::eigenvalues(m).iter().all(|z| z.re < -margin)
}

/// Bass's gain `K = BᵀZ⁻¹` with `(A + βI)Z + Z(A + βI)ᵀ = 2BBᵀ`,
/// `β > ‖A‖₂`; stabilizing whenever `(A, B)` is controllable.
fn bass_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, InverseLqError> {
    let n = a.nrows();
    let beta = linalg::spectral_norm(a) + 1.0;
    let shifted = a + DMatrix::identity(n, n) * beta;
    let z = linalg::solve_lyapunov(&(-shifted.transpose()), &(b * b.transpose() * 2.0))?;
    let z = linalg::symmetrize(&z);
    let k = z.clone().cholesky().map(|c| c.solve(b).transpose()).ok_or(InverseLqError::NoStabilizingGain)?;
    if is_hurwitz(&(a - b * &k)) {
        Ok(k)
    } else {
        Err(InverseLqError::NoStabilizingGain)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CareSolution {
    pub p: DMatrix<f64>,
    /// `R⁻¹BᵀP`.
    pub gain: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Frobenius norm of `AᵀP + PA − PBR⁻¹BᵀP + Q`.
pub fn care_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<f64, InverseLqError> {
    let chol = r.clone().cholesky().ok_or(InverseLqError::RNotPositiveDefinite)?;
    let g = b * chol.solve(&b.transpose());
    Ok((a.transpose() * p + p * a - p * g * p + q).norm())
}

/// Stabilizing solution of the continuous ARE by Newton–Kleinman.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<CareSolution, InverseLqError> {
    let n = a.nrows();
    let m = b.ncols();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(InverseLqError::Dimension(format!(
            "A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    let rs = linalg::symmetrize(r);
    let chol = rs.clone().cholesky().ok_or(InverseLqError::RNotPositiveDefinite)?;
    let rinv_bt = chol.solve(&b.transpose());
    let qs = linalg::symmetrize(q);

    let mut k = if is_hurwitz(a) {
        DMatrix::zeros(m, n)
    } else {
        let mut c = 1.0;
        let mut found = None;
        for _ in 0..60 {
            let kc = b.transpose() * c;
            if is_robustly_hurwitz(&(a - b * &kc)) {
                found = Some(kc);
                break;
            }
            c *= 2.0;
        }
        match found {
            Some(kc) => kc,
            None => bass_gain(a, b)?,
        }
    };

    let mut p = DMatrix::<f64>::zeros(n, n);
    let mut iterations = 0;
    for it in 1..=100 {
        iterations = it;
        let acl = a - b * &k;
        let rhs = &qs + k.transpose() * &rs * &k;
        let p_next = linalg::solve_lyapunov(&acl, &rhs)?;
        let change = (&p_next - &p).norm();
        p = p_next;
        k = &rinv_bt * &p;
        if change <= 1e-13 * p.norm().max(1.0) {
            break;
        }
    }
    let residual = care_residual(a, b, &qs, &rs, &p)?;
    let g = b * &rinv_bt;
    let tol = 1e-8 * (qs.norm() + p.norm_squared() * g.norm()).max(1e-300);
    if !(residual <= tol) && residual > 1e-12 {
        return Err(InverseLqError::NewtonDiverged { iterations, residual });
    }
    Ok(CareSolution { gain: rinv_bt * &p, p, iterations, residual })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowSumReport {
    /// `max_i ‖Σ_j Q_ij‖_F`.
    pub q_residual: f64,
    /// `max_i ‖Σ_j P_ij‖_F`.
    pub p_residual: f64,
    pub passes: bool,
}

/// Zero row-block sums of `Q` and `P`, required of any consensus-optimal pair.
pub fn check_row_sum_conditions(q: &DMatrix<f64>, p: &DMatrix<f64>, n_blocks: usize, n: usize) -> RowSumReport {
    let worst = |m: &DMatrix<f64>| linalg::row_block_sums(m, n_blocks, n).iter().map(|s| s.norm()).fold(0.0, f64::max);
    let q_residual = worst(q);
    let p_residual = worst(p);
    let tol = 1e-8 * 1f64.max(q.norm()).max(p.norm());
    RowSumReport { q_residual, p_residual, passes: q_residual <= tol && p_residual <= tol }
}

/// The linear map `θ = (vec P, vec Q) ↦ S vec P + vec Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct HSystem {
    pub a_tilde: DMatrix<f64>,
    pub b_tilde: DMatrix<f64>,
    pub k_tilde: DMatrix<f64>,
    /// `B̃K̃`.
    pub coupling: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub n_nodes: usize,
    pub state_dim: usize,
}

impl HSystem {
    pub fn dim(&self) -> usize {
        self.n_nodes * self.state_dim
    }

    /// `H = [S, I]`.
    pub fn h(&self) -> DMatrix<f64> {
        let d = self.s.nrows();
        let mut h = DMatrix::zeros(d, 2 * d);
        h.view_mut((0, 0), (d, d)).copy_from(&self.s);
        h.view_mut((0, d), (d, d)).fill_with_identity();
        h
    }

    /// `ÃᵀP + PÃ − P B̃K̃ + Q`, the matrix form of `Hθ`.
    pub fn residual(&self, p: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
        self.a_tilde.transpose() * p + p * &self.a_tilde - p * &self.coupling + q
    }

    /// `‖Hθ‖ / ‖θ‖`.
    pub fn relative_residual(&self, p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
        let norm = (p.norm_squared() + q.norm_squared()).sqrt();
        if norm == 0.0 {
            0.0
        } else {
            self.residual(p, q).norm() / norm
        }
    }
}

pub fn theta(p: &DMatrix<f64>, q: &DMatrix<f64>) -> DVector<f64> {
    let vp = linalg::vec(p);
    let vq = linalg::vec(q);
    DVector::from_iterator(vp.len() + vq.len(), vp.iter().chain(vq.iter()).cloned())
}

/// `Ã = I ⊗ Â`, `B̃ = I ⊗ B̂`, `K̃ = L̂ ⊗ K̂` and the matrix `S`.
pub fn build_h(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    l: &DMatrix<f64>,
    k: &DMatrix<f64>,
) -> Result<HSystem, InverseLqError> {
    let n = a.nrows();
    let m = b.ncols();
    let n_nodes = l.nrows();
    if !a.is_square() || b.nrows() != n || k.shape() != (m, n) || !l.is_square() {
        return Err(InverseLqError::Dimension(format!(
            "Â {:?}, B̂ {:?}, L̂ {:?}, K̂ {:?}",
            a.shape(),
            b.shape(),
            l.shape(),
            k.shape()
        )));
    }
    let id_n = DMatrix::identity(n_nodes, n_nodes);
    let a_tilde = kron(&id_n, a);
    let b_tilde = kron(&id_n, b);
    let k_tilde = kron(l, k);
    let coupling = &b_tilde * &k_tilde;
    let d = n_nodes * n;
    let id_d = DMatrix::identity(d, d);
    let at = a_tilde.transpose();
    let s = kron(&id_d, &at) + kron(&at, &id_d) - kron(&coupling.transpose(), &id_d);
    Ok(HSystem { a_tilde, b_tilde, k_tilde, coupling, s, n_nodes, state_dim: n })
}

/// Orthonormal basis of `1^⊥` in `R^N` (Helmert contrasts).
fn helmert(n_nodes: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_nodes, n_nodes.saturating_sub(1), |i, k| {
        let kk = (k + 1) as f64;
        let scale = 1.0 / (kk * (kk + 1.0)).sqrt();
        if i <= k {
            scale
        } else if i == k + 1 {
            -kk * scale
        } else {
            0.0
        }
    })
}

/// Coordinates on the row-block-sum-free subspace: `P = U X Uᵀ + V W Uᵀ`
/// with `U = E ⊗ I_n` spanning the consensus-orthogonal complement and
/// `V = 1/√N ⊗ I_n`. In symmetric mode `X` is symmetric and `W = 0`.
struct Subspace {
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    symmetric: bool,
}

#[derive(Debug, Clone)]
struct Coords {
    xp: DMatrix<f64>,
    wp: DMatrix<f64>,
    xq: DMatrix<f64>,
    wq: DMatrix<f64>,
}

impl Coords {
    fn zeros(d: usize, n: usize) -> Self {
        Self { xp: DMatrix::zeros(d, d), wp: DMatrix::zeros(n, d), xq: DMatrix::zeros(d, d), wq: DMatrix::zeros(n, d) }
    }
    fn axpy(&self, s: f64, o: &Coords) -> Coords {
        Coords {
            xp: &self.xp + &o.xp * s,
            wp: &self.wp + &o.wp * s,
            xq: &self.xq + &o.xq * s,
            wq: &self.wq + &o.wq * s,
        }
    }
    fn norm(&self) -> f64 {
        (self.xp.norm_squared() + self.wp.norm_squared() + self.xq.norm_squared() + self.wq.norm_squared()).sqrt()
    }
}

impl Subspace {
    fn new(n_nodes: usize, n: usize, symmetric: bool) -> Self {
        let id = DMatrix::identity(n, n);
        let u = kron(&helmert(n_nodes), &id);
        let v = kron(&DMatrix::from_element(n_nodes, 1, 1.0 / (n_nodes as f64).sqrt()), &id);
        Self { u, v, symmetric }
    }

    fn d(&self) -> usize {
        self.u.ncols()
    }

    fn n(&self) -> usize {
        self.v.ncols()
    }

    fn to_pq(&self, c: &Coords) -> (DMatrix<f64>, DMatrix<f64>) {
        let ut = self.u.transpose();
        let p = &self.u * &c.xp * &ut + &self.v * &c.wp * &ut;
        let q = &self.u * &c.xq * &ut + &self.v * &c.wq * &ut;
        (p, q)
    }

    /// Adjoint of `to_pq` applied to matrix gradients.
    fn pull_back(&self, gp: &DMatrix<f64>, gq: &DMatrix<f64>) -> Coords {
        let ut = self.u.transpose();
        let vt = self.v.transpose();
        let mut c =
            Coords { xp: &ut * gp * &self.u, wp: &vt * gp * &self.u, xq: &ut * gq * &self.u, wq: &vt * gq * &self.u };
        if self.symmetric {
            c.xp = linalg::symmetrize(&c.xp);
            c.xq = linalg::symmetrize(&c.xq);
            c.wp.fill(0.0);
            c.wq.fill(0.0);
        }
        c
    }

    /// Orthonormal coordinate basis, used for the explicit restricted `H`.
    fn basis(&self) -> Vec<Coords> {
        let (d, n) = (self.d(), self.n());
        let mut out = Vec::new();
        for which in 0..2 {
            for i in 0..d {
                let j_range: Vec<usize> = if self.symmetric { (i..d).collect() } else { (0..d).collect() };
                for j in j_range {
                    let mut x = DMatrix::zeros(d, d);
                    if self.symmetric && i != j {
                        x[(i, j)] = std::f64::consts::FRAC_1_SQRT_2;
                        x[(j, i)] = std::f64::consts::FRAC_1_SQRT_2;
                    } else {
                        x[(i, j)] = 1.0;
                    }
                    let mut c = Coords::zeros(d, n);
                    if which == 0 {
                        c.xp = x;
                    } else {
                        c.xq = x;
                    }
                    out.push(c);
                }
            }
            if !self.symmetric {
                for i in 0..n {
                    for j in 0..d {
                        let mut c = Coords::zeros(d, n);
                        let mut w = DMatrix::zeros(n, d);
                        w[(i, j)] = 1.0;
                        if which == 0 {
                            c.wp = w;
                        } else {
                            c.wq = w;
                        }
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

fn restricted_h(h: &HSystem, sub: &Subspace) -> (DMatrix<f64>, Vec<Coords>) {
    let basis = sub.basis();
    let rows = h.dim() * h.dim();
    let mut mat = DMatrix::zeros(rows, basis.len());
    for (col, c) in basis.iter().enumerate() {
        let (p, q) = sub.to_pq(c);
        mat.set_column(col, &linalg::vec(&h.residual(&p, &q)));
    }
    (mat, basis)
}

/// Dimension of the numerical nullspace of `H` restricted to matrices with
/// zero row-block sums (and symmetric, if requested), with the restricted
/// singular values in non-increasing order.
pub fn constrained_nullspace(h: &HSystem, symmetric: bool, rel_tol: f64) -> (usize, DVector<f64>) {
    let sub = Subspace::new(h.n_nodes, h.state_dim, symmetric);
    let (mat, basis) = restricted_h(h, &sub);
    let sv = linalg::singular_values(&mat);
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let rank = sv.iter().filter(|&&s| s > rel_tol * smax).count();
    (basis.len() - rank, sv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InverseLqConfig {
    pub max_iters: usize,
    /// Stop when the relative iterate change falls below this.
    pub tolerance: f64,
    /// `δ = delta_rel · ‖θ‖` lower bound on the compressed spectra of P and Q.
    pub delta_rel: f64,
}

impl Default for InverseLqConfig {
    fn default() -> Self {
        Self { max_iters: 20_000, tolerance: 1e-13, delta_rel: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseLqSolution {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// `‖Hθ‖ / ‖θ‖` with `‖θ‖ = 1`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Smallest eigenvalue of `UᵀPU` and `UᵀQU` (symmetric parts).
    pub min_eig_p: f64,
    pub min_eig_q: f64,
    pub row_sums: RowSumReport,
}

/// Euclidean projection of `v` onto `{x : x_i ≥ lo, Σx = total}`.
fn project_capped_simplex(v: &[f64], lo: f64, total: f64) -> Vec<f64> {
    let (mut a, mut b) = (
        v.iter().cloned().fold(f64::INFINITY, f64::min) - total - lo,
        v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - lo,
    );
    let sum_at = |t: f64| v.iter().map(|x| (x - t).max(lo)).sum::<f64>();
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if sum_at(mid) > total {
            a = mid;
        } else {
            b = mid;
        }
    }
    let t = 0.5 * (a + b);
    v.iter().map(|x| (x - t).max(lo)).collect()
}

/// Projection onto `{sym(X_P) ⪰ δ, sym(X_Q) ⪰ δ, tr X_P + tr X_Q = 1}`;
/// skew parts and `W` are untouched.
fn project_feasible(c: &Coords, delta: f64) -> Coords {
    let sp = linalg::symmetrize(&c.xp);
    let sq = linalg::symmetrize(&c.xq);
    let ep = sp.clone().symmetric_eigen();
    let eq = sq.clone().symmetric_eigen();
    let d = sp.nrows();
    let all: Vec<f64> = ep.eigenvalues.iter().chain(eq.eigenvalues.iter()).cloned().collect();
    let lo = delta.min(0.5 / d as f64);
    let proj = project_capped_simplex(&all, lo, 1.0);
    let rebuild = |vecs: &DMatrix<f64>, vals: &[f64]| {
        vecs * DMatrix::from_diagonal(&DVector::from_column_slice(vals)) * vecs.transpose()
    };
    let new_p = rebuild(&ep.eigenvectors, &proj[..d]);
    let new_q = rebuild(&eq.eigenvectors, &proj[d..]);
    Coords { xp: new_p + (&c.xp - &sp), wp: c.wp.clone(), xq: new_q + (&c.xq - &sq), wq: c.wq.clone() }
}

/// Minimize `‖Hθ‖²` over `P, Q` with zero row-block sums, compressed
/// spectra `⪰ δ` on the consensus-orthogonal complement, optional symmetry,
/// and `‖θ‖ = 1`.
///
/// The unit sphere is replaced by `tr X_P + tr X_Q = 1` during the solve
/// (which keeps the problem convex) and the result is rescaled at the end;
/// every constraint is conic so the rescaling preserves feasibility.
pub fn solve_inverse_lq(
    h: &HSystem,
    symmetric: bool,
    cfg: &InverseLqConfig,
) -> Result<InverseLqSolution, InverseLqError> {
    if h.n_nodes < 2 {
        return Err(InverseLqError::Infeasible("need at least two nodes".into()));
    }
    let sub = Subspace::new(h.n_nodes, h.state_dim, symmetric);
    let (mat, basis) = restricted_h(h, &sub);

    // least right singular vector of the restricted H, sign fixed by tr P > 0
    let f = linalg::svd_full(&mat);
    let last = f.v.column(f.v.ncols() - 1).into_owned();
    let mut init = Coords::zeros(sub.d(), sub.n());
    for (coef, b) in last.iter().zip(basis.iter()) {
        init = init.axpy(*coef, b);
    }
    let tr = init.xp.trace() + init.xq.trace();
    let scale = if tr.abs() > 1e-12 { 1.0 / tr } else { 1.0 };
    init = Coords::zeros(sub.d(), sub.n()).axpy(scale, &init);

    let smax = f.s.iter().cloned().fold(0.0, f64::max);
    let lip = 2.0 * smax * smax;
    let step = if lip > 0.0 { 1.0 / lip } else { 1.0 };
    let delta_for = |c: &Coords| cfg.delta_rel * c.norm();

    let objective = |c: &Coords| {
        let (p, q) = sub.to_pq(c);
        h.residual(&p, &q).norm_squared()
    };
    let gradient = |c: &Coords| {
        let (p, q) = sub.to_pq(c);
        let r = h.residual(&p, &q);
        let gp = (&h.a_tilde * &r + &r * h.a_tilde.transpose() - &r * h.coupling.transpose()) * 2.0;
        let gq = &r * 2.0;
        sub.pull_back(&gp, &gq)
    };

    let mut x = project_feasible(&init, delta_for(&init));
    let mut best = (objective(&x) / x.norm().powi(2), x.clone());
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.max_iters {
        iterations = it;
        let g = gradient(&y);
        let stepped = y.axpy(-step, &g);
        let x_next = project_feasible(&stepped, delta_for(&stepped));
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let diff = x_next.axpy(-1.0, &x);
        y = x_next.axpy((t - 1.0) / t_next, &diff);
        let change = diff.norm();
        x = x_next;
        t = t_next;
        let obj = objective(&x) / x.norm().powi(2);
        if obj < best.0 {
            best = (obj, x.clone());
        } else if obj > best.0 * (1.0 + 1e-9) && it % 200 == 0 {
            // adaptive restart keeps the accelerated iteration from drifting
            y = best.1.clone();
            x = best.1.clone();
            t = 1.0;
        }
        if change <= cfg.tolerance * x.norm().max(1e-300) {
            converged = true;
            break;
        }
    }

    let c = best.1;
    let norm = c.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(InverseLqError::Infeasible("solution collapsed to zero".into()));
    }
    let c = Coords::zeros(sub.d(), sub.n()).axpy(1.0 / norm, &c);
    let (mut p, mut q) = sub.to_pq(&c);
    if symmetric {
        p = linalg::symmetrize(&p);
        q = linalg::symmetrize(&q);
    }
    let min_eig = |x: &DMatrix<f64>| linalg::symmetrize(x).symmetric_eigenvalues().min();
    let min_eig_p = min_eig(&c.xp);
    let min_eig_q = min_eig(&c.xq);
    let residual = h.relative_residual(&p, &q);
    let row_sums = check_row_sum_conditions(&q, &p, h.n_nodes, h.state_dim);
    Ok(InverseLqSolution { p, q, residual, iterations, converged, min_eig_p, min_eig_q, row_sums })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RRecovery {
    pub r: DMatrix<f64>,
    /// `‖R̂ − R̂ᵀ‖_F / ‖R̂‖_F` before symmetrization.
    pub asymmetry: f64,
    /// `Nm − rank(K̃B̃)`; directions where `R̂` is filled in, not determined.
    pub kernel_dim: usize,
    pub min_eig: f64,
    pub positive_definite: bool,
}

/// `R̂ = B̃ᵀP̂B̃ (K̃B̃)⁺ + ρ (I − K̃B̃ (K̃B̃)⁺)`, symmetrized.
///
/// `K̃B̃ = L ⊗ KB` always loses rank along the consensus direction, so the
/// inverse is a pseudo-inverse and the undetermined block is filled with the
/// mean eigenvalue `ρ` of the determined part.
pub fn recover_r(
    b_tilde: &DMatrix<f64>,
    p_hat: &DMatrix<f64>,
    k_tilde: &DMatrix<f64>,
) -> Result<RRecovery, InverseLqError> {
    let d = b_tilde.nrows();
    let m = b_tilde.ncols();
    if p_hat.shape() != (d, d) || k_tilde.shape() != (m, d) {
        return Err(InverseLqError::Dimension(format!(
            "B̃ {:?}, P̂ {:?}, K̃ {:?}",
            b_tilde.shape(),
            p_hat.shape(),
            k_tilde.shape()
        )));
    }
    let g = k_tilde * b_tilde;
    let rank = linalg::rank(&g, 1e-10);
    if rank == 0 {
        return Err(InverseLqError::SingularGain);
    }
    let gp = linalg::pinv(&g, 1e-10);
    let c = b_tilde.transpose() * p_hat * b_tilde;
    let determined = &c * &gp;
    let rho = determined.trace() / rank as f64;
    let raw = &determined + (DMatrix::identity(m, m) - &g * &gp) * rho;
    let rn = raw.norm();
    let asymmetry = if rn > 0.0 { (&raw - raw.transpose()).norm() / rn } else { 0.0 };
    let r = linalg::symmetrize(&raw);
    let min_eig = r.clone().symmetric_eigenvalues().min();
    Ok(RRecovery { positive_definite: min_eig > 1e-10, r, asymmetry, kernel_dim: m - rank, min_eig })
}

/// `max_k ‖x_A(k) − x_B(k)‖ / max(1, ‖x₀‖)` over noiseless runs.
pub fn trajectory_equivalence(
    a: &ClosedLoop,
    b: &ClosedLoop,
    x0: &DVector<f64>,
    steps: usize,
) -> Result<f64, InverseLqError> {
    if a.dim() != b.dim() || x0.len() != a.dim() {
        return Err(InverseLqError::Dimension(format!("systems {} and {}, x0 {}", a.dim(), b.dim(), x0.len())));
    }
    let (mut xa, mut xb) = (x0.clone(), x0.clone());
    let mut worst = 0.0f64;
    for _ in 0..steps {
        xa = a.ad() * xa;
        xb = b.ad() * xb;
        worst = worst.max((&xa - &xb).norm());
    }
    Ok(worst / x0.norm().max(1.0))
}

/// Ground truth for which `K̃ = L ⊗ K` is exactly LQ-optimal.
///
/// With symmetric `L`, Hurwitz `A`, `A ᵀP₀ + P₀A = −Q₀` and
/// `K = R₀⁻¹BᵀP₀`, the pair `P = L ⊗ P₀`, `R = I ⊗ R₀`,
/// `Q = L ⊗ Q₀ + L² ⊗ P₀BR₀⁻¹BᵀP₀` solves the global ARE with `P`
/// stabilizing.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusOptimalDesign {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub p0: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

pub fn consensus_optimal_design(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    l: &DMatrix<f64>,
    q0: &DMatrix<f64>,
    r0: &DMatrix<f64>,
) -> Result<ConsensusOptimalDesign, InverseLqError> {
    if (l - l.transpose()).norm() > 1e-12 * l.norm().max(1.0) {
        return Err(InverseLqError::Dimension("L must be symmetric".into()));
    }
    if !is_hurwitz(a) {
        return Err(InverseLqError::NotHurwitz);
    }
    let chol = r0.clone().cholesky().ok_or(InverseLqError::RNotPositiveDefinite)?;
    let p0 = linalg::solve_lyapunov(a, q0)?;
    let k = chol.solve(&(b.transpose() * &p0));
    let g0 = &p0 * b * &k;
    let n_nodes = l.nrows();
    let p = kron(l, &p0);
    let q = linalg::symmetrize(&(kron(l, q0) + kron(&(l * l), &g0)));
    let r = kron(&DMatrix::identity(n_nodes, n_nodes), r0);
    Ok(ConsensusOptimalDesign { a: a.clone(), b: b.clone(), k, l: l.clone(), p0, p, q, r })
}

impl ConsensusOptimalDesign {
    pub fn h_system(&self) -> Result<HSystem, InverseLqError> {
        build_h(&self.a, &self.b, &self.l, &self.k)
    }

    pub fn n_nodes(&self) -> usize {
        self.l.nrows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn path_laplacian(n: usize, w: f64) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(n, n);
        for i in 0..n - 1 {
            l[(i, i)] += w;
            l[(i + 1, i + 1)] += w;
            l[(i, i + 1)] -= w;
            l[(i + 1, i)] -= w;
        }
        l
    }

    fn stable_nodal(n: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let shift = linalg::eigenvalues(&m).iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        let a = m - DMatrix::identity(n, n) * (shift + 0.5);
        let b = DMatrix::from_fn(n, 1, |_, _| rng.random_range(0.2..1.0));
        (a, b)
    }

    fn design(n_nodes: usize, n: usize, seed: u64) -> ConsensusOptimalDesign {
        let (a, b) = stable_nodal(n, seed);
        consensus_optimal_design(
            &a,
            &b,
            &path_laplacian(n_nodes, 1.0),
            &DMatrix::identity(n, n),
            &DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    #[test]
    fn scalar_care() {
        let one = DMatrix::identity(1, 1);
        let sol = solve_care(&(-&one), &one, &one, &one).unwrap();
        assert_relative_eq!(sol.p[(0, 0)], 2f64.sqrt() - 1.0, epsilon = 1e-12);
        let zero = solve_care(&(-&one * 2.0), &one, &DMatrix::zeros(1, 1), &one).unwrap();
        assert_eq!(zero.p[(0, 0)], 0.0);
    }

    #[test]
    fn random_care_is_stabilizing() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
            let b = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
            let q = DMatrix::identity(6, 6);
            let r = DMatrix::identity(2, 2);
            let sol = solve_care(&a, &b, &q, &r).unwrap();
            assert!(sol.residual < 1e-8);
            assert!(is_hurwitz(&(&a - &b * &sol.gain)));
            assert!(sol.p.clone().symmetric_eigenvalues().min() > -1e-8);
        }
    }

    #[test]
    fn row_sum_report() {
        let l = path_laplacian(3, 1.0);
        let q = kron(&l, &DMatrix::identity(2, 2));
        assert!(check_row_sum_conditions(&q, &q, 3, 2).passes);
        let id = DMatrix::identity(6, 6);
        let rep = check_row_sum_conditions(&id, &q, 3, 2);
        assert!(!rep.passes);
        assert_relative_eq!(rep.q_residual, 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn forward_design_is_consistent() {
        let d = design(4, 3, 1);
        let big_a = kron(&DMatrix::identity(4, 4), &d.a);
        let big_b = kron(&DMatrix::identity(4, 4), &d.b);
        let sol = solve_care(&big_a, &big_b, &d.q, &d.r).unwrap();
        assert!((&sol.p - &d.p).norm() < 1e-8 * d.p.norm());
        assert!((&sol.gain - kron(&d.l, &d.k)).norm() < 1e-8);
        assert!(check_row_sum_conditions(&d.q, &sol.p, 4, 3).passes);
    }

    #[test]
    fn h_examples() {
        let n = 2;
        let h = build_h(&DMatrix::zeros(n, n), &DMatrix::identity(n, 1), &DMatrix::zeros(3, 3), &DMatrix::zeros(1, n))
            .unwrap();
        assert_eq!(h.s, DMatrix::zeros(36, 36));
        let hm = h.h();
        assert_eq!(hm.view((0, 36), (36, 36)).into_owned(), DMatrix::identity(36, 36));

        let d = design(3, 2, 4);
        let h = d.h_system().unwrap();
        let th = theta(&d.p, &d.q);
        assert!((h.h() * &th).norm() / th.norm() < 1e-8);
        // explicit S agrees with the matrix form
        assert!((&h.s * linalg::vec(&d.p) - linalg::vec(&(h.residual(&d.p, &d.q) - &d.q))).norm() < 1e-10);

        let scaled = build_h(&d.a, &d.b, &(&d.l * 3.0), &(&d.k / 3.0)).unwrap();
        assert!((scaled.s - &h.s).norm() < 1e-12);
    }

    #[test]
    fn nullspace_exists_for_more_than_two_nodes() {
        for n_nodes in [3, 4] {
            let d = design(n_nodes, 2, 3);
            let h = d.h_system().unwrap();
            let (dim, _) = constrained_nullspace(&h, false, 1e-9);
            assert!(dim >= 1);
            let (dim_sym, _) = constrained_nullspace(&h, true, 1e-9);
            assert!(dim_sym >= 1);
        }
    }

    #[test]
    fn inverse_solution_is_feasible_and_consistent() {
        let d = design(4, 2, 7);
        let h = d.h_system().unwrap();
        let sol = solve_inverse_lq(&h, true, &InverseLqConfig::default()).unwrap();
        assert!(sol.residual < 1e-6, "residual {}", sol.residual);
        assert!(sol.row_sums.passes);
        assert!(sol.min_eig_p > 0.0 && sol.min_eig_q > 0.0);
        assert_relative_eq!(theta(&sol.p, &sol.q).norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn r_recovery_examples() {
        let d = design(4, 2, 2);
        let bt = kron(&DMatrix::identity(4, 4), &d.b);
        let kt = kron(&d.l, &d.k);
        let rec = recover_r(&bt, &d.p, &kt).unwrap();
        assert!(linalg::rel_frobenius(&rec.r, &d.r) < 1e-6);
        assert_eq!(rec.kernel_dim, 1);
        assert!(rec.positive_definite);

        let zero = recover_r(&bt, &DMatrix::zeros(8, 8), &kt).unwrap();
        assert_eq!(zero.r, DMatrix::zeros(4, 4));
        assert!(!zero.positive_definite);

        let doubled = recover_r(&bt, &(&d.p * 3.0), &kt).unwrap();
        assert!((doubled.r - &rec.r * 3.0).norm() < 1e-10);

        assert_eq!(recover_r(&bt, &d.p, &DMatrix::zeros(4, 8)), Err(InverseLqError::SingularGain));
    }

    #[test]
    fn trajectory_equivalence_discriminates() {
        let d = design(3, 2, 5);
        let big_a = kron(&DMatrix::identity(3, 3), &d.a);
        let big_b = kron(&DMatrix::identity(3, 3), &d.b);
        let ac = &big_a - &big_b * kron(&d.l, &d.k);
        let cl = ClosedLoop::from_ac(ac.clone(), 0.05, 3, 2).unwrap();
        let x0 = DVector::from_fn(6, |i, _| i as f64 + 1.0);
        assert_eq!(trajectory_equivalence(&cl, &cl, &x0, 100).unwrap(), 0.0);
        let k_bad = &d.k + DMatrix::from_element(1, 2, 0.5 * d.k.norm());
        let ac_bad = &big_a - &big_b * kron(&d.l, &k_bad);
        let bad = ClosedLoop::from_ac(ac_bad, 0.05, 3, 2).unwrap();
        assert!(trajectory_equivalence(&cl, &bad, &x0, 1000).unwrap() > 1e-3);
    }

    #[test]
    fn capped_simplex_projection() {
        let p = project_capped_simplex(&[0.5, 0.2, -1.0], 0.01, 1.0);
        assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(p.iter().all(|&x| x >= 0.01 - 1e-15));
        assert!(p[0] > p[1]);
    }
}
