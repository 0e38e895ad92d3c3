//! Dense linear-algebra helpers shared by the inference stages.
//!
//! Everything here works on `nalgebra::DMatrix<f64>`; the matrices in this
//! problem are at most a few hundred rows, so dense factorizations are fine.

use nalgebra::{DMatrix, DVector, Schur};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is singular or too ill-conditioned (condition number {cond:.3e})")]
    Singular { cond: f64 },
    #[error("Schur decomposition did not converge")]
    SchurFailed,
    #[error("Sylvester equation is singular (eigenvalues of A and -B overlap)")]
    SylvesterSingular,
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * aij));
        }
    }
    out
}

/// Thin SVD `M = U diag(s) Vᴴ` with `s` non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd<T: nalgebra::Scalar> {
    pub u: DMatrix<T>,
    pub s: DVector<f64>,
    pub v: DMatrix<T>,
}

// nalgebra's own SVD loses accuracy on clustered singular values, so the
// factorization is delegated to faer.
fn to_faer<T: nalgebra::Scalar + Copy>(m: &DMatrix<T>) -> faer::Mat<T> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn from_faer<T: nalgebra::Scalar + Copy>(m: faer::MatRef<'_, T>) -> DMatrix<T> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub fn svd(m: &DMatrix<f64>) -> Svd<f64> {
    let k = m.nrows().min(m.ncols());
    if k == 0 {
        return Svd { u: DMatrix::zeros(m.nrows(), 0), s: DVector::zeros(0), v: DMatrix::zeros(m.ncols(), 0) };
    }
    let f = to_faer(m).thin_svd().expect("SVD did not converge");
    Svd { u: from_faer(f.U()), s: DVector::from_iterator(k, (0..k).map(|i| f.S()[i])), v: from_faer(f.V()) }
}

/// Full SVD: `u` is square in the row dimension, `v` in the column
/// dimension; `s` has `min(rows, cols)` entries.
pub fn svd_full(m: &DMatrix<f64>) -> Svd<f64> {
    let k = m.nrows().min(m.ncols());
    if k == 0 {
        return Svd {
            u: DMatrix::identity(m.nrows(), m.nrows()),
            s: DVector::zeros(0),
            v: DMatrix::identity(m.ncols(), m.ncols()),
        };
    }
    let f = to_faer(m).svd().expect("SVD did not converge");
    Svd { u: from_faer(f.U()), s: DVector::from_iterator(k, (0..k).map(|i| f.S()[i])), v: from_faer(f.V()) }
}

pub fn svd_complex(m: &DMatrix<Complex64>) -> Svd<Complex64> {
    let k = m.nrows().min(m.ncols());
    if k == 0 {
        return Svd { u: DMatrix::zeros(m.nrows(), 0), s: DVector::zeros(0), v: DMatrix::zeros(m.ncols(), 0) };
    }
    let f = to_faer(m).thin_svd().expect("SVD did not converge");
    Svd { u: from_faer(f.U()), s: DVector::from_iterator(k, (0..k).map(|i| f.S()[i].re)), v: from_faer(f.V()) }
}

/// Singular values, non-increasing.
pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    if m.is_empty() {
        return DVector::zeros(0);
    }
    let k = m.nrows().min(m.ncols());
    let mut sv = to_faer(m).singular_values().expect("SVD did not converge");
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    DVector::from_iterator(k, sv.into_iter())
}

/// Moore–Penrose inverse, dropping singular values below `rel_tol · s_max`.
pub fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let f = svd(m);
    let cut = rel_tol * f.s.iter().cloned().fold(0.0, f64::max);
    let inv = f.s.map(|s| if s > cut && s > 0.0 { 1.0 / s } else { 0.0 });
    &f.v * DMatrix::from_diagonal(&inv) * f.u.transpose()
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).iter().cloned().fold(0.0, f64::max)
}

/// 2-norm condition number; `inf` for singular input.
pub fn cond2(m: &DMatrix<f64>) -> f64 {
    let sv = singular_values(m);
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn ones(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0)
}

/// `1_N ⊗ I_n`, the block column that sums row blocks.
pub fn block_ones(n_blocks: usize, n: usize) -> DMatrix<f64> {
    kron(&DMatrix::from_element(n_blocks, 1, 1.0), &DMatrix::identity(n, n))
}

/// Row-block sums `M (1_N ⊗ I_n)` split into the `N` blocks of size `n×n`.
pub fn row_block_sums(m: &DMatrix<f64>, n_blocks: usize, n: usize) -> Vec<DMatrix<f64>> {
    (0..n_blocks)
        .map(|i| {
            let mut s = DMatrix::zeros(n, m.ncols() / n_blocks.max(1));
            for j in 0..n_blocks {
                s += m.view((i * n, j * n), (n, n));
            }
            s
        })
        .collect()
}

/// Largest Frobenius distance between any row-block sum and the first one.
pub fn row_block_spread(m: &DMatrix<f64>, n_blocks: usize, n: usize) -> f64 {
    let sums = row_block_sums(m, n_blocks, n);
    sums.iter().map(|s| (s - &sums[0]).norm()).fold(0.0, f64::max)
}

pub fn block(m: &DMatrix<f64>, i: usize, j: usize, n: usize) -> DMatrix<f64> {
    m.view((i * n, j * n), (n, n)).into_owned()
}

/// `X = B · M⁻¹`, computed as an LU solve of `Mᵀ Xᵀ = Bᵀ`.
pub fn solve_right(b: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    if m.nrows() != m.ncols() || b.ncols() != m.nrows() {
        return Err(LinalgError::Dimension(format!("solve_right: B is {:?}, M is {:?}", b.shape(), m.shape())));
    }
    let lu = m.transpose().lu();
    lu.solve(&b.transpose()).map(|x| x.transpose()).ok_or(LinalgError::Singular { cond: f64::INFINITY })
}

/// Padé-13 numerator coefficients.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential by scaling and squaring with a degree-13 Padé
/// approximant.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm needs a square matrix");
    let n = a.nrows();
    if n == 0 {
        return a.clone();
    }
    let norm = one_norm(a);
    if norm == 0.0 {
        return DMatrix::identity(n, n);
    }
    let s = if norm > THETA13 { (norm / THETA13).log2().ceil().max(0.0) as i32 } else { 0 };
    let a = a * 2f64.powi(-s);
    let b = &PADE13;
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;

    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]) + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]) + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];

    let p = &v + &u;
    let q = &v - &u;
    let mut r = q.lu().solve(&p).expect("Padé denominator is nonsingular for scaled input");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|v| Complex64::new(v, 0.0))
}

/// Eigenvalues of a real square matrix.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex64> {
    m.complex_eigenvalues().iter().cloned().collect()
}

/// Eigenvalues of a complex square matrix, read off the complex Schur form.
pub fn complex_eigenvalues(m: &DMatrix<Complex64>) -> Result<Vec<Complex64>, LinalgError> {
    let schur = Schur::try_new(m.clone(), 1e-15, 0).ok_or(LinalgError::SchurFailed)?;
    let (_, t) = schur.unpack();
    Ok((0..t.nrows()).map(|i| t[(i, i)]).collect())
}

/// Solve the Sylvester equation `A X + X B = C` by Bartels–Stewart on the
/// complex Schur forms of `A` and `B`.
pub fn solve_sylvester(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let (m, n) = (a.nrows(), b.nrows());
    if !a.is_square() || !b.is_square() || c.shape() != (m, n) {
        return Err(LinalgError::Dimension(format!(
            "sylvester: A {:?}, B {:?}, C {:?}",
            a.shape(),
            b.shape(),
            c.shape()
        )));
    }
    let sa = Schur::try_new(to_complex(a), 1e-15, 0).ok_or(LinalgError::SchurFailed)?;
    let sb = Schur::try_new(to_complex(b), 1e-15, 0).ok_or(LinalgError::SchurFailed)?;
    let (qa, ta) = sa.unpack();
    let (qb, tb) = sb.unpack();

    // Qaᴴ A Qa = Ta (upper), Qbᴴ B Qb = Tb (upper); Ta Y + Y Tb = Qaᴴ C Qb.
    let d = qa.adjoint() * to_complex(c) * &qb;
    let scale = ta.norm() + tb.norm();
    let mut y = DMatrix::<Complex64>::zeros(m, n);
    for j in 0..n {
        let mut rhs = d.column(j).into_owned();
        for k in 0..j {
            let coeff = tb[(k, j)];
            if coeff != Complex64::new(0.0, 0.0) {
                rhs -= y.column(k) * coeff;
            }
        }
        // back substitution with (Ta + tb_jj I)
        let shift = tb[(j, j)];
        for i in (0..m).rev() {
            let mut acc = rhs[i];
            for k in (i + 1)..m {
                acc -= ta[(i, k)] * y[(k, j)];
            }
            let diag = ta[(i, i)] + shift;
            if diag.norm() <= 1e-14 * scale.max(1.0) {
                return Err(LinalgError::SylvesterSingular);
            }
            y[(i, j)] = acc / diag;
        }
    }
    let x = qa * y * qb.adjoint();
    Ok(x.map(|v| v.re))
}

/// Solve the continuous Lyapunov equation `Aᵀ X + X A + C = 0`.
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let x = solve_sylvester(&a.transpose(), a, &(-c))?;
    Ok(symmetrize(&x))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Numerical rank with a tolerance relative to the largest singular value.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = singular_values(m);
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// Best scalar `γ` minimizing `‖γ·estimate − truth‖_F`.
pub fn best_scale(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Option<f64> {
    let denom = estimate.norm_squared();
    if denom == 0.0 {
        None
    } else {
        Some(estimate.dot(truth) / denom)
    }
}

/// `‖estimate − truth‖_F / ‖truth‖_F`.
pub fn rel_frobenius(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    (estimate - truth).norm() / truth.norm()
}

/// `vec(M)`: columns stacked.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v)
}
