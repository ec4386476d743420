//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::rng;

/// Relative singular-value cutoff used wherever a numerical rank is needed.
pub const RANK_RTOL: f64 = 1e-10;

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Number of singular values above `RANK_RTOL * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = singular_values(m);
    match sv.first() {
        Some(&max) if max > 0.0 => sv.iter().filter(|&&s| s > RANK_RTOL * max).count(),
        _ => 0,
    }
}

/// Orthonormal basis (as columns) of the column space of `m`, ordered by
/// decreasing singular value.
pub fn column_space_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    let rank = numerical_rank(m);
    if rank == 0 {
        return DMatrix::zeros(d, 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut basis = DMatrix::zeros(d, rank);
    for (k, &j) in order.iter().take(rank).enumerate() {
        basis.set_column(k, &u.column(j));
    }
    basis
}

/// Orthogonal projector onto the complement of the column space of `m`.
pub fn complement_projector(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    let basis = column_space_basis(m);
    DMatrix::identity(d, d) - &basis * basis.transpose()
}

/// Haar-distributed orthogonal `n × n` matrix: QR of a Gaussian matrix with the
/// signs of R's diagonal folded into Q.
pub fn haar_orthogonal(n: usize, seed: u64) -> DMatrix<f64> {
    let g = rng::normal_matrix(&mut rng::seeded(seed), n, n);
    let qr = g.qr();
    let (q, r) = qr.unpack();
    let mut q = q;
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Squared Euclidean norm of every column.
pub fn column_sq_norms(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.norm_squared()))
}

/// Euclidean norm of every row.
pub fn row_norms(m: &DMatrix<f64>) -> Vec<f64> {
    m.row_iter().map(|r| r.norm()).collect()
}

/// Eigenvalues of a symmetric matrix in descending order.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

pub fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.norm_squared()
}
