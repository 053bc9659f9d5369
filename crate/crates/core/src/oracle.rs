//! Reference solvers for the convex special cases: the sample τ-expectile and
//! linear expectile regression. They share no code with the network path and
//! serve as baselines and test oracles.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::error::{EnnError, Result};
use crate::model::check_tau;

pub const ORACLE_TOLERANCE: f64 = 1e-10;
pub const ORACLE_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarExpectile {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearExpectileFit {
    pub intercept: f64,
    pub coefficients: Array1<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub tolerance: f64,
}

impl LinearExpectileFit {
    pub fn predict(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.intercept + x.dot(&self.coefficients)
    }
}

fn check_finite(y: ArrayView1<'_, f64>) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EnnError::Config(
            "response contains non-finite values".into(),
        ))
    }
}

/// Sample τ-expectile of `y`.
pub fn scalar_expectile(y: ArrayView1<'_, f64>, tau: f64) -> Result<f64> {
    Ok(scalar_expectile_solution(y, tau)?.value)
}

/// Fixed-point iteration
/// `mu <- (tau * S_hi + (1 - tau) * S_lo) / (tau * n_hi + (1 - tau) * n_lo)`
/// where `hi`/`lo` split the sample at the current `mu`.
pub fn scalar_expectile_solution(y: ArrayView1<'_, f64>, tau: f64) -> Result<ScalarExpectile> {
    check_tau(tau)?;
    if y.is_empty() {
        return Err(EnnError::EmptyDataset("expectile of an empty sample"));
    }
    check_finite(y)?;
    let mut mu = y.sum() / y.len() as f64;
    for it in 1..=ORACLE_MAX_ITER {
        let (mut s_hi, mut s_lo, mut n_hi, mut n_lo) = (0.0, 0.0, 0.0, 0.0);
        for &v in y {
            if v >= mu {
                s_hi += v;
                n_hi += 1.0;
            } else {
                s_lo += v;
                n_lo += 1.0;
            }
        }
        let next = (tau * s_hi + (1.0 - tau) * s_lo) / (tau * n_hi + (1.0 - tau) * n_lo);
        let delta = (next - mu).abs();
        mu = next;
        if delta <= ORACLE_TOLERANCE {
            return Ok(ScalarExpectile {
                value: mu,
                iterations: it,
                converged: true,
                tolerance: ORACLE_TOLERANCE,
            });
        }
    }
    Ok(ScalarExpectile {
        value: mu,
        iterations: ORACLE_MAX_ITER,
        converged: false,
        tolerance: ORACLE_TOLERANCE,
    })
}

/// Linear expectile regression by iteratively reweighted ridge least squares.
///
/// Minimizes `(1/n) sum L_tau(y_i, b0 + x_i'b) + lambda |b|^2` with the
/// intercept unpenalized.
pub fn linear_expectile_fit(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    tau: f64,
    lambda: f64,
) -> Result<LinearExpectileFit> {
    check_tau(tau)?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(EnnError::Config(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    let (n, p) = x.dim();
    if n == 0 {
        return Err(EnnError::EmptyDataset("expectile regression needs samples"));
    }
    if y.len() != n {
        return Err(EnnError::DimensionMismatch {
            what: "response length",
            expected: n,
            actual: y.len(),
        });
    }
    check_finite(y)?;
    let design = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[[i, j - 1]] });
    let yv = DVector::from_iterator(n, y.iter().copied());

    // start from the symmetric (least squares) fit
    let mut weights = DVector::from_element(n, 0.5);
    let mut beta = weighted_ridge(&design, &yv, &weights, lambda)?;
    for it in 1..=ORACLE_MAX_ITER {
        let fitted = &design * &beta;
        for i in 0..n {
            weights[i] = if yv[i] >= fitted[i] { tau } else { 1.0 - tau };
        }
        let next = weighted_ridge(&design, &yv, &weights, lambda)?;
        let change = (&next - &beta).amax();
        beta = next;
        if change <= ORACLE_TOLERANCE {
            return Ok(finish(&beta, it, true));
        }
    }
    Ok(finish(&beta, ORACLE_MAX_ITER, false))
}

fn finish(beta: &DVector<f64>, iterations: usize, converged: bool) -> LinearExpectileFit {
    LinearExpectileFit {
        intercept: beta[0],
        coefficients: beta.rows(1, beta.len() - 1).iter().copied().collect(),
        iterations,
        converged,
        tolerance: ORACLE_TOLERANCE,
    }
}

/// Solve `(X'WX/n + lambda D) b = X'Wy/n`, D = diag(0, 1, ..., 1).
fn weighted_ridge(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    weights: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>> {
    let n = design.nrows() as f64;
    let k = design.ncols();
    let weighted = DMatrix::from_fn(design.nrows(), k, |i, j| design[(i, j)] * weights[i]);
    let mut gram = weighted.transpose() * design / n;
    for j in 1..k {
        gram[(j, j)] += lambda;
    }
    let rhs = weighted.transpose() * y / n;
    let max_diag = (0..k).map(|j| gram[(j, j)]).fold(0.0, f64::max);
    let chol = gram.clone().cholesky().ok_or(EnnError::RankDeficient)?;
    let min_pivot = chol
        .l_dirty()
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(v * v));
    if min_pivot <= 1e-12 * max_diag {
        return Err(EnnError::RankDeficient);
    }
    Ok(chol.solve(&rhs))
}
