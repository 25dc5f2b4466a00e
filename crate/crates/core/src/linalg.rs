//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};

pub type C64 = Complex<f64>;
pub type CMatrix = DMatrix<C64>;
pub type RMatrix = DMatrix<f64>;

/// Relative singular-value cutoff for generalized inverses.
pub const PINV_CUTOFF: f64 = 1e-10;

/// Condition-number gate for ordinary inverses.
pub const CONDITION_GATE: f64 = 1e12;

pub fn c(re: f64, im: f64) -> C64 {
    Complex::new(re, im)
}

pub fn identity(dim: usize) -> CMatrix {
    CMatrix::identity(dim, dim)
}

pub fn pauli_x() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)])
}

pub fn pauli_y() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.0, -1.0), c(0.0, 1.0), c(0.0, 0.0)])
}

pub fn pauli_z() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-1.0, 0.0)])
}

pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

/// `(a + a†) / 2`.
pub fn symmetrize(a: &CMatrix) -> CMatrix {
    (a + a.adjoint()).scale(0.5)
}

pub fn max_abs(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn max_abs_real(a: &RMatrix) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

pub fn hermiticity_defect(a: &CMatrix) -> f64 {
    max_abs(&(a - a.adjoint()))
}

/// Real part of `tr(a b)`.
pub fn trace_product(a: &CMatrix, b: &CMatrix) -> f64 {
    // tr(ab) = sum_jk a_jk b_kj
    let n = a.nrows();
    let mut acc = C64::new(0.0, 0.0);
    for j in 0..n {
        for k in 0..n {
            acc += a[(j, k)] * b[(k, j)];
        }
    }
    acc.re
}

/// Eigen-decomposition of a Hermitian matrix with eigenvalues in ascending
/// order. Columns of the returned matrix are the matching eigenvectors.
pub fn hermitian_eigen(a: &CMatrix) -> (Vec<f64>, CMatrix) {
    let eig = SymmetricEigen::new(symmetrize(a));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = CMatrix::zeros(a.nrows(), a.ncols());
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn hermitian_eigenvalues(a: &CMatrix) -> Vec<f64> {
    hermitian_eigen(a).0
}

pub fn min_eigenvalue(a: &CMatrix) -> f64 {
    hermitian_eigenvalues(a).first().copied().unwrap_or(0.0)
}

/// Trace norm of a Hermitian matrix.
pub fn trace_norm(a: &CMatrix) -> f64 {
    hermitian_eigenvalues(a).iter().map(|v| v.abs()).sum()
}

/// Rebuilds `V diag(f(λ)) V†`.
pub fn hermitian_function(a: &CMatrix, f: impl Fn(f64) -> f64) -> CMatrix {
    let (values, vectors) = hermitian_eigen(a);
    let diag = CMatrix::from_diagonal(&DVector::from_iterator(
        values.len(),
        values.iter().map(|&v| C64::new(f(v), 0.0)),
    ));
    &vectors * diag * vectors.adjoint()
}

/// Eigen-decomposition of a real symmetric matrix, ascending.
pub fn symmetric_eigen(a: &RMatrix) -> (Vec<f64>, RMatrix) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = RMatrix::zeros(a.nrows(), a.ncols());
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn min_symmetric_eigenvalue(a: &RMatrix) -> f64 {
    symmetric_eigen(a).0.first().copied().unwrap_or(0.0)
}

/// Moore–Penrose inverse with singular values below
/// `PINV_CUTOFF * sigma_max` treated as zero.
pub fn pinv(a: &RMatrix) -> RMatrix {
    if a.is_empty() {
        return a.transpose();
    }
    let svd = a.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return RMatrix::zeros(a.ncols(), a.nrows()),
    };
    let mut out = RMatrix::zeros(a.ncols(), a.nrows());
    if sigma_max == 0.0 {
        return out;
    }
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > PINV_CUTOFF * sigma_max {
            out += vt.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    out
}

/// 2-norm condition number; infinite for singular matrices.
pub fn condition_number(a: &RMatrix) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let sv = a.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse gated on the condition number; `Err(cond)` when the gate fails.
pub fn gated_inverse(a: &RMatrix) -> Result<RMatrix, f64> {
    let cond = condition_number(a);
    if !(cond < CONDITION_GATE) {
        return Err(cond);
    }
    a.clone().try_inverse().ok_or(cond)
}

/// Principal square root of a PSD matrix.
pub fn sqrt_psd(a: &CMatrix) -> CMatrix {
    hermitian_function(a, |v| v.max(0.0).sqrt())
}

/// Inverse square root of a positive definite matrix.
pub fn inv_sqrt_pd(a: &CMatrix) -> CMatrix {
    hermitian_function(a, |v| 1.0 / v.sqrt())
}

pub fn real_trace_product(a: &RMatrix, b: &RMatrix) -> f64 {
    (a * b).trace()
}
