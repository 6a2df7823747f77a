//! Small dense linear-algebra helpers on top of nalgebra.
//!
//! Everything here works on symmetric matrices of modest size (d ≤ 64 or so),
//! so eigendecompositions are used freely.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Absolute tolerance used when classifying eigenvalues against a threshold.
pub const EIGEN_CLASSIFY_TOL: f64 = 1e-12;

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// decreasing order. The input is symmetrized first.
pub fn sym_eigen(m: &Matrix) -> (Vector, Matrix) {
    let sym = symmetrize(m);
    let n = sym.nrows();
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Matrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Rebuild U diag(f(λ)) Uᵀ from an eigendecomposition.
pub fn spectral_map(values: &Vector, vectors: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let n = values.len();
    let mut scaled = vectors.clone();
    for j in 0..n {
        let s = f(values[j]);
        scaled.column_mut(j).scale_mut(s);
    }
    scaled * vectors.transpose()
}

/// Square root of a PSD matrix; tiny negative eigenvalues are clamped to 0.
pub fn psd_sqrt(m: &Matrix) -> Matrix {
    let (vals, vecs) = sym_eigen(m);
    spectral_map(&vals, &vecs, |l| l.max(0.0).sqrt())
}

/// Inverse square root of a positive definite matrix.
pub fn pd_inv_sqrt(m: &Matrix) -> Option<Matrix> {
    let (vals, vecs) = sym_eigen(m);
    if vals.iter().any(|&l| !(l > 0.0)) {
        return None;
    }
    Some(spectral_map(&vals, &vecs, |l| 1.0 / l.sqrt()))
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix. Eigenvalues at or
/// below `tol` times the largest eigenvalue are treated as zero.
pub fn psd_pinv(m: &Matrix, tol: f64) -> Matrix {
    let (vals, vecs) = sym_eigen(m);
    let cut = tol * vals.iter().cloned().fold(0.0, f64::max);
    spectral_map(&vals, &vecs, |l| if l > cut && l > 0.0 { 1.0 / l } else { 0.0 })
}

/// Orthogonal projector onto the span of eigenvectors whose eigenvalue is at
/// least `threshold` (within [`EIGEN_CLASSIFY_TOL`]).
pub fn eigen_projector(values: &Vector, vectors: &Matrix, threshold: f64) -> Matrix {
    spectral_map(values, vectors, |l| {
        if l >= threshold - EIGEN_CLASSIFY_TOL {
            1.0
        } else {
            0.0
        }
    })
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &Matrix) -> Option<Matrix> {
    m.clone().cholesky().map(|c| c.inverse())
}

/// log det of a symmetric positive definite matrix.
pub fn spd_log_det(m: &Matrix) -> Option<f64> {
    let c = m.clone().cholesky()?;
    Some(2.0 * c.l().diagonal().iter().map(|x| x.ln()).sum::<f64>())
}

/// ‖x‖_M = sqrt(xᵀ M x).
pub fn mahalanobis(x: &Vector, m: &Matrix) -> f64 {
    (x.dot(&(m * x))).max(0.0).sqrt()
}

/// Largest eigenvalue with its unit eigenvector (symmetrized input). For the
/// zero matrix the returned vector is e₁.
pub fn top_eigenpair(m: &Matrix) -> (f64, Vector) {
    let n = m.nrows();
    if m.iter().all(|&x| x == 0.0) {
        let mut e = Vector::zeros(n);
        if n > 0 {
            e[0] = 1.0;
        }
        return (0.0, e);
    }
    let (vals, vecs) = sym_eigen(m);
    let mut v = vecs.column(0).into_owned();
    // fix the sign so the output is deterministic
    if let Some(idx) = v.iter().position(|x| x.abs() > 1e-12) {
        if v[idx] < 0.0 {
            v = -v;
        }
    }
    (vals[0], v)
}

pub fn frobenius(m: &Matrix) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Spectral norm of a symmetric matrix.
pub fn sym_spectral_norm(m: &Matrix) -> f64 {
    let (vals, _) = sym_eigen(m);
    vals.iter().fold(0.0, |a, &l| a.max(l.abs()))
}

/// Orthonormal basis of the column space of `points` stacked as columns,
/// using singular values above `rel_tol` times the largest one.
pub fn span_basis(points: &[Vector], dim: usize, rel_tol: f64) -> Matrix {
    if points.is_empty() {
        return Matrix::zeros(dim, 0);
    }
    let mut cols = Matrix::zeros(dim, points.len());
    for (j, p) in points.iter().enumerate() {
        cols.set_column(j, p);
    }
    let svd = cols.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let top = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if top <= 0.0 {
        return Matrix::zeros(dim, 0);
    }
    let mut keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > rel_tol * top)
        .collect();
    keep.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    Matrix::from_fn(dim, keep.len(), |r, c| u[(r, keep[c])])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_psd(seed: u64, n: usize) -> Matrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &a * a.transpose()
    }

    #[test]
    fn eigen_sorted_descending() {
        let m = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 3.0, 2.0]));
        let (vals, _) = sym_eigen(&m);
        assert_eq!(vals.as_slice(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn top_eigenpair_of_zero_is_e1() {
        let (l, v) = top_eigenpair(&Matrix::zeros(3, 3));
        assert_eq!(l, 0.0);
        assert_eq!(v, Vector::from_vec(vec![1.0, 0.0, 0.0]));
    }

    #[test]
    fn planted_diag_top_eigenpair() {
        let m = Matrix::from_diagonal(&Vector::from_vec(vec![0.5, -0.1]));
        let (l, v) = top_eigenpair(&m);
        assert!((l - 0.5).abs() < 1e-14);
        assert!((v[0].abs() - 1.0).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn sqrt_reconstructs_psd(seed in 0u64..10_000, n in 1usize..7) {
            let a = random_psd(seed, n);
            let r = psd_sqrt(&a);
            prop_assert!(frobenius(&(&r * &r - &a)) <= 1e-9);
        }

        #[test]
        fn inv_sqrt_inverts(seed in 0u64..10_000, n in 1usize..6) {
            let a = random_psd(seed, n) + Matrix::identity(n, n);
            let r = pd_inv_sqrt(&a).unwrap();
            prop_assert!(frobenius(&(&r * &a * &r - Matrix::identity(n, n))) <= 1e-9);
        }

        #[test]
        fn projector_is_idempotent(seed in 0u64..10_000, n in 1usize..7, thr in 0.0f64..2.0) {
            let a = random_psd(seed, n);
            let (vals, vecs) = sym_eigen(&a);
            let p = eigen_projector(&vals, &vecs, thr);
            prop_assert!(frobenius(&(&p * &p - &p)) <= 1e-10);
            prop_assert!(frobenius(&(&p - p.transpose())) <= 1e-10);
        }
    }
}
