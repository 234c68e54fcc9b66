//! Small dense helpers shared by the statistical modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population (ddof = 0) mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (m, var.sqrt())
}

/// Column `j` of a row-major table.
pub fn column(rows: &[Vec<f64>], j: usize) -> Vec<f64> {
    rows.iter().map(|r| r[j]).collect()
}

#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub condition_number: f64,
    pub ridge_fallback: bool,
}

impl LeastSquares {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.intercept
            + row
                .iter()
                .zip(&self.coefficients)
                .map(|(x, b)| x * b)
                .sum::<f64>()
    }
}

/// Ordinary least squares with an intercept, solved through the normal
/// equations. When the Gram matrix condition number exceeds `max_condition`
/// a small ridge term is added to its diagonal.
pub fn least_squares(x: &DMatrix<f64>, y: &[f64], max_condition: f64) -> Result<LeastSquares> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::Shape {
            expected: n,
            got: y.len(),
        });
    }
    let design = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let yv = DVector::from_column_slice(y);
    let mut gram = design.transpose() * &design;
    let rhs = design.transpose() * yv;

    let sv = gram.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let condition_number = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let ridge_fallback = !(condition_number <= max_condition);
    if ridge_fallback {
        let lambda = 1e-8 * gram.trace() / (p + 1) as f64;
        for j in 1..=p {
            gram[(j, j)] += lambda;
        }
    }
    let beta = gram
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| gram.lu().solve(&rhs))
        .ok_or_else(|| Error::Degenerate("normal equations are singular".into()))?;
    Ok(LeastSquares {
        intercept: beta[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        condition_number,
        ridge_fallback,
    })
}

/// Minimum-norm least squares with intercept via SVD; used where exact
/// collinearity is expected and must be tolerated.
pub fn least_squares_pinv(x: &DMatrix<f64>, y: &[f64]) -> Result<LeastSquares> {
    let (n, p) = x.shape();
    let design = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * 1e-12 * n.max(p + 1) as f64;
    let beta = svd
        .solve(&DVector::from_column_slice(y), eps)
        .map_err(|e| Error::Degenerate(e.to_string()))?;
    let smin = svd.singular_values.min();
    Ok(LeastSquares {
        intercept: beta[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        condition_number: if smin > 0.0 { smax / smin } else { f64::INFINITY },
        ridge_fallback: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let x = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let fit = least_squares(&x, &[1.0, 3.0, 5.0, 7.0], 1e10).unwrap();
        assert!((fit.intercept - 1.0).abs() < 1e-10);
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-10);
        assert!(!fit.ridge_fallback);
    }

    #[test]
    fn collinear_columns_trigger_fallback() {
        let x = DMatrix::from_fn(6, 2, |i, j| (i as f64) * (j as f64 + 1.0));
        let y: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let fit = least_squares(&x, &y, 1e10).unwrap();
        assert!(fit.ridge_fallback);
        let pred = fit.predict_row(&[2.0, 4.0]);
        assert!((pred - 2.0).abs() < 1e-4);
    }
}
