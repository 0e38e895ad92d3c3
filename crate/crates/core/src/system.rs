//! Ground-truth construction for a networked linear system under
//! Laplacian-coupled state feedback.
//!
//! Every node runs `ẋ_i = A x_i + B u_i` with
//! `u_i = K Σ_j a_ij (x_j − x_i)`, so the stacked state obeys
//! `ẋ = (I_N ⊗ A − L ⊗ BK) x = A_c x`. Sampling every `τ` seconds gives the
//! exact transition `A_d = exp(A_c τ)`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, kron, LinalgError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("invalid adjacency: {0}")]
    InvalidAdjacency(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("B must have full column rank (rank {rank}, m = {m}, n = {n})")]
    RankDeficientInput { rank: usize, m: usize, n: usize },
    #[error("sampling period must be positive and finite, got {0}")]
    InvalidTau(f64),
    #[error("Laplacian is not diagonalizable: {0}")]
    NotDiagonalizable(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Weighted directed graph; `a_ij > 0` means node `i` listens to node `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedGraph {
    adjacency: DMatrix<f64>,
}

impl DirectedGraph {
    pub fn new(adjacency: DMatrix<f64>) -> Result<Self, SystemError> {
        if !adjacency.is_square() || adjacency.nrows() == 0 {
            return Err(SystemError::InvalidAdjacency(format!(
                "adjacency must be square and non-empty, got {:?}",
                adjacency.shape()
            )));
        }
        for i in 0..adjacency.nrows() {
            for j in 0..adjacency.ncols() {
                let w = adjacency[(i, j)];
                if !w.is_finite() || w < 0.0 {
                    return Err(SystemError::InvalidAdjacency(format!(
                        "entry ({i}, {j}) = {w} is not a nonnegative finite weight"
                    )));
                }
                if i == j && w != 0.0 {
                    return Err(SystemError::InvalidAdjacency(format!("self-loop at node {i}")));
                }
            }
        }
        Ok(Self { adjacency })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, SystemError> {
        Self::new(matrix_from_rows(rows).map_err(SystemError::InvalidAdjacency)?)
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    /// Directed edge set `(i, j)` with `a_ij > 0`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n_nodes();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if self.adjacency[(i, j)] > 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Graph Laplacian `L = diag(A_0 1) − A_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Laplacian(DMatrix<f64>);

impl Laplacian {
    /// Wrap an arbitrary square matrix, e.g. an estimate.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self, SystemError> {
        if !m.is_square() {
            return Err(SystemError::Dimension(format!("Laplacian must be square, got {:?}", m.shape())));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn n_nodes(&self) -> usize {
        self.0.nrows()
    }

    /// Mean diagonal entry, i.e. the average weighted in-degree.
    pub fn mean_degree(&self) -> f64 {
        self.0.diagonal().mean()
    }

    pub fn max_row_sum(&self) -> f64 {
        self.0.row_iter().map(|r| r.sum().abs()).fold(0.0, f64::max)
    }
}

pub fn build_laplacian(g: &DirectedGraph) -> Laplacian {
    let a = g.adjacency();
    let n = a.nrows();
    let mut l = -a.clone();
    for i in 0..n {
        // sum of the off-diagonal entries keeps L·1 exactly zero in floating point
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| l[(i, j)]).sum();
        l[(i, i)] = -off;
    }
    Laplacian(l)
}

/// Nodal dynamics `(A, B, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    k: DMatrix<f64>,
}

impl NodalSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, k: DMatrix<f64>) -> Result<Self, SystemError> {
        let n = a.nrows();
        if !a.is_square() || n == 0 {
            return Err(SystemError::Dimension(format!("A must be square, got {:?}", a.shape())));
        }
        let m = b.ncols();
        if b.nrows() != n || m == 0 || m > n {
            return Err(SystemError::Dimension(format!("B must be n×m with 1 ≤ m ≤ n = {n}, got {:?}", b.shape())));
        }
        if k.shape() != (m, n) {
            return Err(SystemError::Dimension(format!("K must be {m}×{n}, got {:?}", k.shape())));
        }
        let rank = linalg::rank(&b, 1e-12);
        if rank != m {
            return Err(SystemError::RankDeficientInput { rank, m, n });
        }
        Ok(Self { a, b, k })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    pub fn bk(&self) -> DMatrix<f64> {
        &self.b * &self.k
    }
}

/// `A_c = I_N ⊗ A − L ⊗ BK`.
pub fn closed_loop_matrix(sys: &NodalSystem, l: &Laplacian) -> Result<DMatrix<f64>, SystemError> {
    if !l.matrix().is_square() {
        return Err(SystemError::Dimension("Laplacian must be square".into()));
    }
    let n_nodes = l.n_nodes();
    let id = DMatrix::identity(n_nodes, n_nodes);
    Ok(kron(&id, sys.a()) - kron(l.matrix(), &sys.bk()))
}

/// `A_d = exp(A_c τ)`.
pub fn discretize(ac: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    linalg::expm(&(ac * tau))
}

/// Continuous closed loop together with its exact discretization.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    ac: DMatrix<f64>,
    ad: DMatrix<f64>,
    tau: f64,
    n_nodes: usize,
    state_dim: usize,
}

impl ClosedLoop {
    pub fn new(sys: &NodalSystem, l: &Laplacian, tau: f64) -> Result<Self, SystemError> {
        let ac = closed_loop_matrix(sys, l)?;
        Self::from_ac(ac, tau, l.n_nodes(), sys.state_dim())
    }

    pub fn from_ac(ac: DMatrix<f64>, tau: f64, n_nodes: usize, state_dim: usize) -> Result<Self, SystemError> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(SystemError::InvalidTau(tau));
        }
        if ac.shape() != (n_nodes * state_dim, n_nodes * state_dim) {
            return Err(SystemError::Dimension(format!(
                "A_c is {:?}, expected {}×{}",
                ac.shape(),
                n_nodes * state_dim,
                n_nodes * state_dim
            )));
        }
        let ad = discretize(&ac, tau);
        Ok(Self { ac, ad, tau, n_nodes, state_dim })
    }

    /// Closed loop given only its transition matrix; `A_c` is left empty.
    pub fn from_ad(ad: DMatrix<f64>, tau: f64, n_nodes: usize, state_dim: usize) -> Result<Self, SystemError> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(SystemError::InvalidTau(tau));
        }
        if ad.shape() != (n_nodes * state_dim, n_nodes * state_dim) {
            return Err(SystemError::Dimension(format!("A_d is {:?}", ad.shape())));
        }
        Ok(Self { ac: DMatrix::zeros(0, 0), ad, tau, n_nodes, state_dim })
    }

    pub fn ac(&self) -> &DMatrix<f64> {
        &self.ac
    }
    pub fn ad(&self) -> &DMatrix<f64> {
        &self.ad
    }
    pub fn tau(&self) -> f64 {
        self.tau
    }
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn dim(&self) -> usize {
        self.n_nodes * self.state_dim
    }
}

const EIGEN_CLUSTER_TOL: f64 = 1e-8;
const EIGENVECTOR_COND_MAX: f64 = 1e8;
const CONSENSUS_EIGEN_TOL: f64 = 1e-9;

/// Eigenvalues of `m` after checking it has a diagonal Jordan form.
///
/// Eigenvalues closer than 1e-8 are grouped; each group must have a full set
/// of independent eigenvectors, and the assembled eigenvector matrix must have
/// condition number at most 1e8.
pub fn diagonalizable_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex64>, SystemError> {
    let n = m.nrows();
    let eig = linalg::eigenvalues(m);
    let scale = m.norm().max(1.0);

    let mut clusters: Vec<Vec<Complex64>> = Vec::new();
    for &lam in &eig {
        match clusters.iter_mut().find(|c| c.iter().any(|&mu| (mu - lam).norm() < EIGEN_CLUSTER_TOL * scale)) {
            Some(c) => c.push(lam),
            None => clusters.push(vec![lam]),
        }
    }

    let mc = linalg::to_complex(m);
    let mut vectors: Vec<nalgebra::DVector<Complex64>> = Vec::with_capacity(n);
    for cluster in &clusters {
        let k = cluster.len();
        let center = cluster.iter().sum::<Complex64>() / k as f64;
        let shifted = &mc - DMatrix::<Complex64>::identity(n, n) * center;
        let f = linalg::svd_complex(&shifted);
        // s is non-increasing: the last k columns of V span the candidate eigenspace
        let kth = f.s[n - k];
        if kth > 1e-6 * scale {
            return Err(SystemError::NotDiagonalizable(format!(
                "eigenvalue {center:.6e} has algebraic multiplicity {k} but a deficient eigenspace \
                 (σ_{k} = {kth:.3e})"
            )));
        }
        for idx in (n - k)..n {
            vectors.push(f.v.column(idx).into_owned());
        }
    }
    let v = DMatrix::from_columns(&vectors);
    let sv = linalg::svd_complex(&v).s;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let cond = if smin == 0.0 { f64::INFINITY } else { smax / smin };
    if cond > EIGENVECTOR_COND_MAX {
        return Err(SystemError::NotDiagonalizable(format!(
            "eigenvector matrix condition number {cond:.3e} exceeds {EIGENVECTOR_COND_MAX:.0e}"
        )));
    }
    Ok(eig)
}

/// Smallest pairwise distance between eigenvalues in the complex plane.
pub fn min_eigen_gap(m: &DMatrix<f64>) -> f64 {
    let eig = linalg::eigenvalues(m);
    let mut gap = f64::INFINITY;
    for i in 0..eig.len() {
        for j in (i + 1)..eig.len() {
            gap = gap.min((eig[i] - eig[j]).norm());
        }
    }
    gap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub lambda_re: f64,
    pub lambda_im: f64,
    /// Largest real part among the eigenvalues of `A − λ BK`.
    pub max_real_part: f64,
    pub hurwitz: bool,
    pub consensus_mode: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    pub modes: Vec<ModeReport>,
    pub has_consensus_mode: bool,
    pub achieves_consensus: bool,
}

/// Per-mode consensus check: `A − λ_i BK` must be Hurwitz for every
/// Laplacian eigenvalue except the zero (consensus) one.
pub fn check_consensus_stability(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k: &DMatrix<f64>,
    l: &Laplacian,
) -> Result<ConsensusReport, SystemError> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || k.shape() != (b.ncols(), n) {
        return Err(SystemError::Dimension(format!("A {:?}, B {:?}, K {:?}", a.shape(), b.shape(), k.shape())));
    }
    let mut eig = diagonalizable_eigenvalues(l.matrix())?;
    eig.sort_by(|x, y| x.norm().partial_cmp(&y.norm()).unwrap());
    let has_consensus_mode = eig.first().map(|z| z.norm() <= CONSENSUS_EIGEN_TOL).unwrap_or(false);

    let bk = b * k;
    let mut modes = Vec::with_capacity(eig.len());
    for (idx, &lam) in eig.iter().enumerate() {
        let consensus_mode = idx == 0 && has_consensus_mode;
        // A − λBK = X + iY, realified as [[X, −Y], [Y, X]]; same real parts
        let x = a - &bk * lam.re;
        let y = -&bk * lam.im;
        let mut real = DMatrix::zeros(2 * n, 2 * n);
        real.view_mut((0, 0), (n, n)).copy_from(&x);
        real.view_mut((n, n), (n, n)).copy_from(&x);
        real.view_mut((0, n), (n, n)).copy_from(&(-&y));
        real.view_mut((n, 0), (n, n)).copy_from(&y);
        let max_real_part = linalg::eigenvalues(&real).iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        modes.push(ModeReport {
            lambda_re: lam.re,
            lambda_im: lam.im,
            max_real_part,
            hurwitz: max_real_part < 0.0,
            consensus_mode,
        });
    }
    let achieves_consensus = has_consensus_mode && modes.iter().filter(|m| !m.consensus_mode).all(|m| m.hurwitz);
    Ok(ConsensusReport { modes, has_consensus_mode, achieves_consensus })
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
    let r = rows.len();
    let c = rows.first().map(|x| x.len()).unwrap_or(0);
    if rows.iter().any(|row| row.len() != c) {
        return Err("ragged matrix rows".into());
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

/// JSON system definition: adjacency plus nodal matrices, all row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub adjacency: Vec<Vec<f64>>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "K")]
    pub k: Vec<Vec<f64>>,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

impl SystemSpec {
    pub fn graph(&self) -> Result<DirectedGraph, SystemError> {
        DirectedGraph::from_rows(&self.adjacency)
    }

    pub fn nodal(&self) -> Result<NodalSystem, SystemError> {
        let conv = |rows: &[Vec<f64>], name: &str| {
            matrix_from_rows(rows).map_err(|e| SystemError::Dimension(format!("{name}: {e}")))
        };
        NodalSystem::new(conv(&self.a, "A")?, conv(&self.b, "B")?, conv(&self.k, "K")?)
    }

    pub fn closed_loop(&self) -> Result<ClosedLoop, SystemError> {
        let l = build_laplacian(&self.graph()?);
        ClosedLoop::new(&self.nodal()?, &l, self.tau)
    }

    pub fn from_parts(g: &DirectedGraph, sys: &NodalSystem, tau: f64) -> Self {
        Self {
            adjacency: matrix_to_rows(g.adjacency()),
            a: matrix_to_rows(sys.a()),
            b: matrix_to_rows(sys.b()),
            k: matrix_to_rows(sys.k()),
            tau,
            x0: None,
        }
    }
}

/// Six-node, three-state, single-input benchmark network.
pub fn reference_network() -> (DirectedGraph, NodalSystem) {
    #[rustfmt::skip]
    let adjacency = DMatrix::from_row_slice(6, 6, &[
        0.0, 1.0, 0.0, 0.0, 0.0, 0.0,
        1.0, 0.0, 2.0, 0.0, 0.0, 0.0,
        0.0, 2.0, 0.0, 1.0, 0.0, 0.0,
        0.0, 0.0, 2.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 3.0, 0.0, 1.0,
        0.0, 0.0, 1.0, 0.0, 0.0, 0.0,
    ]);
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(3, 3, &[
        -1.0, 2.0, 5.0,
        1.0, -1.0, 2.0,
        -5.0, 0.0, -1.0,
    ]);
    let b = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0]);
    let k = DMatrix::from_row_slice(1, 3, &[-0.0365, 0.4295, 0.9216]);
    (DirectedGraph::new(adjacency).expect("valid adjacency"), NodalSystem::new(a, b, k).expect("valid nodal system"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn path2(weight: f64) -> DirectedGraph {
        DirectedGraph::new(DMatrix::from_row_slice(2, 2, &[0.0, weight, 0.0, 0.0])).unwrap()
    }

    #[test]
    fn laplacian_of_reference_network() {
        let (g, _) = reference_network();
        let l = build_laplacian(&g);
        // row sums of the adjacency, summed by hand
        let expected_diag = [1.0, 3.0, 3.0, 3.0, 4.0, 1.0];
        for (i, d) in expected_diag.iter().enumerate() {
            assert_eq!(l.matrix()[(i, i)], *d);
        }
        assert_eq!(l.max_row_sum(), 0.0);
        assert_relative_eq!(l.mean_degree(), 2.5);
    }

    #[test]
    fn laplacian_zero_graph_and_single_edge() {
        let g = DirectedGraph::new(DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(build_laplacian(&g).into_matrix(), DMatrix::zeros(3, 3));
        let l = build_laplacian(&path2(2.0));
        assert_eq!(l.into_matrix(), DMatrix::from_row_slice(2, 2, &[2.0, -2.0, 0.0, 0.0]));
    }

    #[test]
    fn adjacency_validation() {
        assert!(DirectedGraph::new(DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 0.0, 0.0])).is_err());
        assert!(DirectedGraph::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).is_err());
        assert!(DirectedGraph::new(DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn nodal_system_rejects_rank_deficient_b() {
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let k = DMatrix::zeros(2, 2);
        assert!(matches!(NodalSystem::new(a, b, k), Err(SystemError::RankDeficientInput { rank: 1, .. })));
    }

    #[test]
    fn closed_loop_without_coupling() {
        let (_, sys) = reference_network();
        let l = Laplacian::from_matrix(DMatrix::zeros(4, 4)).unwrap();
        let ac = closed_loop_matrix(&sys, &l).unwrap();
        assert_eq!(ac, kron(&DMatrix::identity(4, 4), sys.a()));

        let l1 = Laplacian::from_matrix(DMatrix::zeros(1, 1)).unwrap();
        assert_eq!(closed_loop_matrix(&sys, &l1).unwrap(), sys.a().clone());
    }

    #[test]
    fn row_block_identity_on_reference_network() {
        let (g, sys) = reference_network();
        let ac = closed_loop_matrix(&sys, &build_laplacian(&g)).unwrap();
        for s in linalg::row_block_sums(&ac, 6, 3) {
            assert!((s - sys.a()).norm() < 1e-12);
        }
    }

    #[test]
    fn discretize_trivial_cases() {
        assert_eq!(discretize(&DMatrix::zeros(4, 4), 0.3), DMatrix::identity(4, 4));
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-1.0, 0.5, 2.0]));
        let ad = discretize(&d, 0.1);
        for (i, v) in [-1.0f64, 0.5, 2.0].iter().enumerate() {
            assert_relative_eq!(ad[(i, i)], (v * 0.1).exp(), max_relative = 1e-14);
        }
        assert!((ad.clone() - DMatrix::from_diagonal(&ad.diagonal())).norm() == 0.0);
    }

    #[test]
    fn discretized_row_blocks_are_nodal_exponential() {
        let (g, sys) = reference_network();
        let cl = ClosedLoop::new(&sys, &build_laplacian(&g), 0.05).unwrap();
        // exp(Aτ) on the 3×3 nodal block, independent of the 18×18 exponential
        let nodal = (sys.a() * 0.05).exp();
        for s in linalg::row_block_sums(cl.ad(), 6, 3) {
            assert!((s - &nodal).norm() < 1e-10);
        }
    }

    #[test]
    fn tau_must_be_positive() {
        let (g, sys) = reference_network();
        assert!(matches!(ClosedLoop::new(&sys, &build_laplacian(&g), 0.0), Err(SystemError::InvalidTau(_))));
    }

    #[test]
    fn reference_network_reaches_consensus() {
        let (g, sys) = reference_network();
        let report = check_consensus_stability(sys.a(), sys.b(), sys.k(), &build_laplacian(&g)).unwrap();
        assert!(report.has_consensus_mode);
        assert!(report.achieves_consensus);
        assert_eq!(report.modes.len(), 6);
        assert_eq!(report.modes.iter().filter(|m| m.consensus_mode).count(), 1);
    }

    #[test]
    fn consensus_fails_without_feedback_on_unstable_nodes() {
        let (g, _) = reference_network();
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 0.0, 0.2]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let k = DMatrix::zeros(1, 2);
        let report = check_consensus_stability(&a, &b, &k, &build_laplacian(&g)).unwrap();
        assert!(!report.achieves_consensus);
    }

    #[test]
    fn consensus_holds_for_stable_nodes_without_feedback() {
        let (g, _) = reference_network();
        let a = -DMatrix::<f64>::identity(2, 2);
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let k = DMatrix::zeros(1, 2);
        let report = check_consensus_stability(&a, &b, &k, &build_laplacian(&g)).unwrap();
        assert!(report.achieves_consensus);
    }

    #[test]
    fn jordan_block_is_rejected() {
        // adjacency of a directed 3-chain gives a nilpotent-plus-diagonal L
        // with a repeated eigenvalue 1 and only one eigenvector
        let g =
            DirectedGraph::new(DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0])).unwrap();
        let l = build_laplacian(&g);
        let err =
            check_consensus_stability(&DMatrix::identity(1, 1), &DMatrix::identity(1, 1), &DMatrix::identity(1, 1), &l)
                .unwrap_err();
        assert!(matches!(err, SystemError::NotDiagonalizable(_)));
    }

    #[test]
    fn semisimple_repeated_eigenvalue_is_accepted() {
        // complete graph on 3 nodes: eigenvalues {0, 3, 3} with a full eigenspace
        let g = DirectedGraph::new(DMatrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 })).unwrap();
        let eig = diagonalizable_eigenvalues(build_laplacian(&g).matrix()).unwrap();
        assert_eq!(eig.len(), 3);
    }

    #[test]
    fn graph_without_consensus_mode_is_flagged() {
        let l = Laplacian::from_matrix(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0]))).unwrap();
        let report = check_consensus_stability(
            &(-DMatrix::<f64>::identity(1, 1)),
            &DMatrix::identity(1, 1),
            &DMatrix::identity(1, 1),
            &l,
        )
        .unwrap();
        assert!(!report.has_consensus_mode);
        assert!(!report.achieves_consensus);
    }

    #[test]
    fn system_spec_json_round_trip() {
        let (g, sys) = reference_network();
        let spec = SystemSpec::from_parts(&g, &sys, 0.05);
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"adjacency\"") && text.contains("\"A\""));
        let back: SystemSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back.closed_loop().unwrap(), spec.closed_loop().unwrap());
    }
}
