//! Small dense linear-algebra helpers shared by the model-building code.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use ndarray_linalg::{Eigh, UPLO};

use crate::error::{Error, Result};

/// Sample covariance of the rows of `data`, normalized by `N - 1`.
///
/// Requires at least two rows.
pub fn sample_covariance(data: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = data.nrows();
    debug_assert!(n >= 2);
    let mean = data.mean_axis(Axis(0)).expect("non-empty");
    let centered = &data - &mean.view().insert_axis(Axis(0));
    let mut cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    symmetrize(&mut cov);
    cov
}

/// Force exact symmetry on a nearly-symmetric matrix.
pub fn symmetrize(m: &mut Array2<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
}

/// Eigenvalues (ascending) and eigenvectors (columns) of a symmetric matrix.
pub fn eigh_sym(m: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    m.eigh(UPLO::Lower)
        .map_err(|e| Error::NumericalFailure(format!("symmetric eigensolver: {e}")))
}

/// Top `k` principal directions of the rows of `data`.
///
/// Returns eigenvalues in descending order and the corresponding unit
/// eigenvectors of the sample covariance as rows of a `k x p` matrix.
/// When the row count is small relative to the dimension, the
/// decomposition is done on the N x N Gram matrix of the centered data
/// and mapped back, which is algebraically the same basis.
pub fn principal_directions(data: ArrayView2<'_, f64>, k: usize) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = data.nrows();
    let p = data.ncols();
    debug_assert!(n >= 2 && k >= 1 && k <= p.min(n - 1));

    let mean = data.mean_axis(Axis(0)).expect("non-empty");
    let centered = &data - &mean.view().insert_axis(Axis(0));

    if p <= n {
        let mut cov = centered.t().dot(&centered) / (n as f64 - 1.0);
        symmetrize(&mut cov);
        let (vals, vecs) = eigh_sym(&cov)?;
        let mut eigenvalues = Vec::with_capacity(k);
        let mut directions = Array2::<f64>::zeros((k, p));
        for i in 0..k {
            let col = p - 1 - i;
            eigenvalues.push(vals[col]);
            directions.row_mut(i).assign(&vecs.column(col));
        }
        Ok((eigenvalues, directions))
    } else {
        // Gram route: eigenvectors u of the covariance are X^T v / ||X^T v||
        // for eigenvectors v of the centered Gram matrix X X^T.
        let mut gram = centered.dot(&centered.t());
        symmetrize(&mut gram);
        let (vals, vecs) = eigh_sym(&gram)?;
        let mut eigenvalues = Vec::with_capacity(k);
        let mut directions = Array2::<f64>::zeros((k, p));
        for i in 0..k {
            let col = n - 1 - i;
            eigenvalues.push(vals[col].max(0.0) / (n as f64 - 1.0));
            let u = centered.t().dot(&vecs.column(col));
            let norm = u.dot(&u).sqrt();
            if norm > 0.0 {
                directions.row_mut(i).assign(&(&u / norm));
            }
        }
        Ok((eigenvalues, directions))
    }
}

/// Largest singular value, computed from the smaller of the two Gram matrices.
pub fn spectral_norm(m: ArrayView2<'_, f64>) -> f64 {
    let (r, c) = (m.nrows(), m.ncols());
    if r == 0 || c == 0 {
        return 0.0;
    }
    let mut gram = if c <= r {
        m.t().dot(&m)
    } else {
        m.dot(&m.t())
    };
    symmetrize(&mut gram);
    match eigh_sym(&gram) {
        Ok((vals, _)) => vals[vals.len() - 1].max(0.0).sqrt(),
        Err(_) => 0.0,
    }
}

/// Frobenius norm.
pub fn fro_norm(m: ArrayView2<'_, f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}
