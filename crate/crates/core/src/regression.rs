//! Gaussian-process kernel regression on trace-kernel Gram matrices.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::Serialize;

use crate::error::{Error, Result};

const MAX_ESCALATIONS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionResult {
    /// Posterior mean, `n_test x label_dim`.
    pub mean: DMatrix<f64>,
    /// Posterior covariance, `n_test x n_test`.
    pub covariance: DMatrix<f64>,
    pub jitter_used: f64,
}

/// `1e-8` times the mean diagonal of `k_train`.
pub fn default_jitter(k_train: &DMatrix<f64>) -> f64 {
    let n = k_train.nrows();
    if n == 0 {
        return 0.0;
    }
    1e-8 * (k_train.trace() / n as f64).abs()
}

fn factorize(k_train: &DMatrix<f64>, jitter: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k_train.nrows();
    let mean_diag = (k_train.trace() / n as f64).abs();
    let mut j = jitter;
    for attempt in 0..=MAX_ESCALATIONS {
        let shifted = k_train + DMatrix::<f64>::identity(n, n) * j;
        if let Some(chol) = Cholesky::new(shifted) {
            if chol.l_dirty().diagonal().iter().all(|v| v.is_finite() && *v > 0.0) {
                return Ok((chol, j));
            }
        }
        if attempt == MAX_ESCALATIONS {
            break;
        }
        j = if j > 0.0 {
            j * 10.0
        } else if mean_diag > 0.0 {
            1e-10 * mean_diag
        } else {
            1e-10
        };
    }
    Err(Error::SingularKernel { jitter: j })
}

/// `mu = K_cross (K_train + jI)^{-1} Y`, `Sigma = K_test - K_cross (K_train + jI)^{-1} K_cross^T`.
///
/// On Cholesky failure the jitter grows tenfold, at most six times; a zero
/// starting jitter first becomes `1e-10` times the mean diagonal.
pub fn gp_regress(
    k_train: &DMatrix<f64>,
    k_cross: &DMatrix<f64>,
    k_test: &DMatrix<f64>,
    y: &DMatrix<f64>,
    jitter: f64,
) -> Result<RegressionResult> {
    let n = k_train.nrows();
    let m = k_cross.nrows();
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::Domain(format!("jitter must be finite and >= 0, got {jitter}")));
    }
    if k_train.ncols() != n {
        return Err(Error::Shape { context: "k_train columns", expected: n, actual: k_train.ncols() });
    }
    if n == 0 {
        return Err(Error::Domain("empty training set".into()));
    }
    if k_cross.ncols() != n {
        return Err(Error::Shape { context: "k_cross columns", expected: n, actual: k_cross.ncols() });
    }
    if k_test.nrows() != m || k_test.ncols() != m {
        return Err(Error::Shape { context: "k_test order", expected: m, actual: k_test.nrows() });
    }
    if y.nrows() != n {
        return Err(Error::Shape { context: "label rows", expected: n, actual: y.nrows() });
    }
    let scale = k_train.amax();
    for i in 0..n {
        for j in i + 1..n {
            if (k_train[(i, j)] - k_train[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::Contract(format!("k_train not symmetric at ({i}, {j})")));
            }
        }
    }

    let (chol, jitter_used) = factorize(k_train, jitter)?;
    let mean = k_cross * chol.solve(y);
    let mut v = k_cross.transpose();
    chol.l_dirty()
        .lower_triangle()
        .solve_lower_triangular_mut(&mut v);
    let mut covariance = k_test - v.tr_mul(&v);
    let sym = (&covariance + covariance.transpose()) * 0.5;
    covariance = sym;
    Ok(RegressionResult {
        mean,
        covariance,
        jitter_used,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Classification {
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
    pub accuracy: f64,
}

/// Index of the row maximum, lowest index on ties.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Argmax classes of the posterior mean against one-hot truth.
pub fn classify(result: &RegressionResult, truth_one_hot: &DMatrix<f64>) -> Result<Classification> {
    let mean = &result.mean;
    if truth_one_hot.shape() != mean.shape() {
        return Err(Error::Shape {
            context: "one-hot truth columns",
            expected: mean.ncols(),
            actual: truth_one_hot.ncols(),
        });
    }
    let predicted: Vec<usize> = mean.row_iter().map(|r| argmax(r.iter().copied())).collect();
    let truth: Vec<usize> = truth_one_hot.row_iter().map(|r| argmax(r.iter().copied())).collect();
    let correct = predicted.iter().zip(&truth).filter(|(a, b)| a == b).count();
    let accuracy = if predicted.is_empty() {
        f64::NAN
    } else {
        correct as f64 / predicted.len() as f64
    };
    Ok(Classification {
        predicted,
        truth,
        accuracy,
    })
}

/// Root mean squared error over all entries.
pub fn rmse(prediction: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
    assert_eq!(prediction.shape(), target.shape());
    ((prediction - target).norm_squared() / prediction.len() as f64).sqrt()
}
