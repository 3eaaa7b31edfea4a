//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// (A + Aᵀ)/2.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Principal square root of the symmetric part of `a`, negative eigenvalues
/// clamped to zero. Returns the root and the most negative eigenvalue seen.
pub fn psd_sqrt(a: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let n = a.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), 0.0);
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let root = v * DMatrix::from_diagonal(&roots) * v.transpose();
    (symmetrize(&root), min_eig)
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(a))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Eigen-decomposition sorted by descending eigenvalue; each eigenvector is
/// flipped so its largest-magnitude entry is positive. Columns are vectors.
pub fn sorted_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let eig = SymmetricEigen::new(symmetrize(a));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mut vals = DVector::zeros(n);
    let mut vecs = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vals[k] = eig.eigenvalues[i];
        let mut col = eig.eigenvectors.column(i).clone_owned();
        let mut pivot = 0;
        for j in 0..n {
            if col[j].abs() > col[pivot].abs() + 1e-12 {
                pivot = j;
            }
        }
        if col[pivot] < 0.0 {
            col = -col;
        }
        vecs.set_column(k, &col);
    }
    (vals, vecs)
}

/// Minimum-norm least-squares solution of `a x ≈ y`.
pub fn lstsq(a: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = smax * 1e-12 * (a.nrows().max(a.ncols()) as f64);
    svd.solve(y, eps).expect("svd computed with u and v")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sqrt_of_identity() {
        let (r, m) = psd_sqrt(&DMatrix::identity(3, 3));
        assert_relative_eq!(r, DMatrix::identity(3, 3), epsilon = 1e-14);
        assert_relative_eq!(m, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn sqrt_squares_back() {
        let b = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, -0.2, 0.1, 2.0, 0.5, 0.0, -0.4, 1.5]);
        let a = &b * b.transpose();
        let (r, _) = psd_sqrt(&a);
        assert_relative_eq!(&r * &r, a, epsilon = 1e-12);
    }

    #[test]
    fn negative_eigenvalues_clamped() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        let (r, m) = psd_sqrt(&a);
        assert!(m < 0.0);
        assert_relative_eq!(r, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]), epsilon = 1e-14);
    }

    #[test]
    fn sorted_eigen_descending_with_sign_convention() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 8.0]);
        let (vals, vecs) = sorted_eigen(&a);
        assert_relative_eq!(vals[0], 8.0);
        assert_relative_eq!(vecs[(1, 0)], 1.0);
        assert_relative_eq!(vecs[(0, 1)], 1.0);
    }

    #[test]
    fn lstsq_min_norm() {
        // Two identical columns: min-norm splits the weight evenly.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let y = DVector::from_vec(vec![2.0, 4.0]);
        let x = lstsq(&a, &y);
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], 1.0, epsilon = 1e-12);
    }
}
