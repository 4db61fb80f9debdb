//! Small dense helpers shared across modules.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eigh, FactorizeC, SolveC, SVD, UPLO};

use crate::error::{Error, Result};

/// Symmetric PSD square root via eigendecomposition; eigenvalues below zero
/// are clipped at zero.
pub fn psd_sqrt(a: &Array2<f64>) -> Result<Array2<f64>> {
    let (vals, vecs) = a.eigh(UPLO::Lower)?;
    let mut scaled = vecs.clone();
    for (j, lam) in vals.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        scaled.column_mut(j).mapv_inplace(|v| v * s);
    }
    Ok(scaled.dot(&vecs.t()))
}

/// Solve the SPD system A X = B for X, column by column through a Cholesky
/// factorization.
pub fn solve_spd(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let f = a
        .factorizec(UPLO::Lower)
        .map_err(|e| Error::Numerical(format!("SPD factorization failed: {e}")))?;
    let mut x = Array2::zeros(b.dim());
    for (j, col) in b.columns().into_iter().enumerate() {
        let sol = f.solvec(&col.to_owned())?;
        x.column_mut(j).assign(&sol);
    }
    Ok(x)
}

/// Largest singular value.
pub fn spectral_norm(a: &Array2<f64>) -> Result<f64> {
    let (_, s, _) = a.svd(false, false)?;
    Ok(s.iter().cloned().fold(0.0, f64::max))
}

pub fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
}

/// Sample mean and deviation matrix of the columns.
pub fn column_mean_dev(members: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = members.ncols() as f64;
    let mean = members.sum_axis(ndarray::Axis(1)) / n;
    let mut dev = members.clone();
    for mut col in dev.columns_mut() {
        col -= &mean;
    }
    (mean, dev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn psd_sqrt_squares_back() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let s = psd_sqrt(&a).unwrap();
        let back = s.dot(&s);
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn spd_solve_matches_direct() {
        let a = array![[2.0, 0.5], [0.5, 1.0]];
        let b = array![[1.0, 0.0], [0.0, 1.0]];
        let x = solve_spd(&a, &b).unwrap();
        let back = a.dot(&x);
        for (got, want) in back.iter().zip(b.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}
