//! Small dense linear-algebra helpers shared by projection and tests.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};

/// Eigen-decomposition of a symmetric matrix, eigenvalues sorted descending.
///
/// Each eigenvector (column of the returned matrix) is flipped so that its
/// largest-magnitude component is positive; on exact magnitude ties the
/// lowest index decides.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (a[[i, j]] + a[[j, i]]));
    let eig = SymmetricEigen::new(m);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]).then(x.cmp(&y)));

    let values = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(src);
        let mut pivot = 0;
        for i in 1..n {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[[i, col]] = sign * v[i];
        }
    }
    (values, vectors)
}

/// Column means and the mean-centered copy of `x`.
pub fn center(x: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("non-empty matrix");
    let centered = x - &mean;
    (mean, centered)
}

/// Orthonormal basis for the column space of `a` (thin QR).
pub fn orthonormal_columns(a: &Array2<f64>) -> Array2<f64> {
    let (r, c) = a.dim();
    let m = DMatrix::from_fn(r, c, |i, j| a[[i, j]]);
    let q = m.qr().q();
    Array2::from_shape_fn((r, c), |(i, j)| q[(i, j)])
}

/// Frobenius norm of `a`.
pub fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}
