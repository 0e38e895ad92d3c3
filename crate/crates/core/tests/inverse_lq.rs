use nalgebra::{DMatrix, DVector};
use netinfer::inverse_lq::{
    build_h, check_row_sum_conditions, consensus_optimal_design, constrained_nullspace, recover_r, solve_care,
    solve_inverse_lq, theta, trajectory_equivalence, ConsensusOptimalDesign, InverseLqConfig,
};
use netinfer::linalg::{self, kron};
use netinfer::ClosedLoop;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_undirected_laplacian(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    loop {
        let mut l = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_bool(0.6) {
                    let w = rng.random_range(0.5..2.0);
                    l[(i, j)] -= w;
                    l[(j, i)] -= w;
                    l[(i, i)] += w;
                    l[(j, j)] += w;
                }
            }
        }
        let eig = l.clone().symmetric_eigenvalues();
        let mut sorted: Vec<f64> = eig.iter().cloned().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted[1] > 0.2 && sorted.windows(2).all(|w| w[1] - w[0] > 0.05) {
            return l;
        }
    }
}

fn random_design(n_nodes: usize, n: usize, seed: u64) -> ConsensusOptimalDesign {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let shift = linalg::eigenvalues(&m).iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    let a = m - DMatrix::identity(n, n) * (shift + 0.3);
    let b = DMatrix::from_fn(n, 1, |_, _| rng.random_range(0.2..1.0));
    let l = random_undirected_laplacian(n_nodes, &mut rng);
    consensus_optimal_design(&a, &b, &l, &DMatrix::identity(n, n), &DMatrix::identity(1, 1)).unwrap()
}

fn reference_design() -> ConsensusOptimalDesign {
    let a = DMatrix::from_row_slice(3, 3, &[-1.0, 2.0, 5.0, 1.0, -1.0, 2.0, -5.0, 0.0, -1.0]);
    let b = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let l = random_undirected_laplacian(6, &mut rng);
    consensus_optimal_design(&a, &b, &l, &DMatrix::identity(3, 3), &DMatrix::identity(1, 1)).unwrap()
}

fn closed_loop(d: &ConsensusOptimalDesign, k_tilde: &DMatrix<f64>) -> ClosedLoop {
    let id = DMatrix::identity(d.n_nodes(), d.n_nodes());
    let ac = kron(&id, &d.a) - kron(&id, &d.b) * k_tilde;
    ClosedLoop::from_ac(ac, 0.05, d.n_nodes(), d.a.nrows()).unwrap()
}

/// Inverse LQ on exact factors, then forward CARE with the recovered weights.
fn round_trip(d: &ConsensusOptimalDesign, symmetric: bool) -> f64 {
    let h = d.h_system().unwrap();
    let sol = solve_inverse_lq(&h, symmetric, &InverseLqConfig::default()).unwrap();
    assert!(sol.row_sums.passes);
    let rec = recover_r(&h.b_tilde, &sol.p, &h.k_tilde).unwrap();
    assert!(rec.positive_definite, "R̂ min eig {}", rec.min_eig);
    let care = solve_care(&h.a_tilde, &h.b_tilde, &sol.q, &rec.r).unwrap();
    let n = d.n_nodes() * d.a.nrows();
    let x0 = DVector::from_fn(n, |i, _| ((i * 37 % 11) as f64) * 90.0);
    trajectory_equivalence(&closed_loop(d, &h.k_tilde), &closed_loop(d, &care.gain), &x0, 1000).unwrap()
}

#[test]
fn true_theta_lies_in_the_kernel() {
    for (n_nodes, seed) in [(3, 1), (4, 2), (6, 3)] {
        let d = random_design(n_nodes, 3, seed);
        let h = d.h_system().unwrap();
        let th = theta(&d.p, &d.q);
        assert!((h.h() * &th).norm() / th.norm() < 1e-8);
        assert!(check_row_sum_conditions(&d.q, &d.p, n_nodes, 3).passes);
        let (dim, _) = constrained_nullspace(&h, false, 1e-9);
        assert!(dim >= 1, "N = {n_nodes}");
    }
}

#[test]
fn forward_care_reproduces_designed_riccati_solution() {
    let d = reference_design();
    let id = DMatrix::identity(6, 6);
    let sol = solve_care(&kron(&id, &d.a), &kron(&id, &d.b), &d.q, &d.r).unwrap();
    assert!(linalg::rel_frobenius(&sol.p, &d.p) < 1e-8);
    assert!(check_row_sum_conditions(&d.q, &sol.p, 6, 3).passes);
}

#[test]
fn nullspace_counting_for_random_factors() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n_nodes in [3, 4, 6] {
        let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(2, 1, |_, _| rng.random_range(-1.0..1.0));
        let k = DMatrix::from_fn(1, 2, |_, _| rng.random_range(-1.0..1.0));
        let l = DMatrix::from_fn(n_nodes, n_nodes, |i, j| if i == j { 0.0 } else { -rng.random_range(0.0..1.0) });
        let l = &l - DMatrix::from_diagonal(&(&l * DVector::from_element(n_nodes, 1.0)));
        let h = build_h(&a, &b, &l, &k).unwrap();
        let (dim, _) = constrained_nullspace(&h, false, 1e-9);
        let unknowns = 2 * n_nodes * n_nodes * 4 - 2 * n_nodes * 4;
        assert!(dim >= unknowns - n_nodes * n_nodes * 4);
    }
}

#[test]
fn inverse_forward_loop_reproduces_trajectories() {
    for (n_nodes, seed) in [(3, 5), (4, 6)] {
        let d = random_design(n_nodes, 3, seed);
        let err = round_trip(&d, true);
        assert!(err < 0.05, "N = {n_nodes}: {err}");
    }
    let err = round_trip(&reference_design(), true);
    assert!(err < 0.05, "reference: {err}");
}
