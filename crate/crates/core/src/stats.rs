//! Regression metrics, PCA, two-sample K-S, confidence-interval widths,
//! correlation and variance inflation factors.
//!
//! Metric conventions:
//!
//! * adjusted R² = 1 − (1 − R²)(n − 1)/(n − k − 1), with `k` the number of
//!   nonzero coefficients (intercept excluded);
//! * AIC = n·ln(MSE) + 2(k + 1) and BIC = n·ln(MSE) + (k + 1)·ln(n);
//! * MAPE = mean(|y − ŷ| / |y|) · 100.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, mean_std};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub r2: f64,
    pub adjusted_r2: f64,
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    /// `None` when some `y_true` is zero.
    pub mape_pct: Option<f64>,
    pub aic: f64,
    pub bic: f64,
    pub n: usize,
    pub k_effective: usize,
}

impl RegressionReport {
    pub fn mape(&self) -> Result<f64> {
        self.mape_pct.ok_or(Error::MapeUndefined)
    }
}

pub fn adjusted_r2(r2: f64, n: usize, k: usize) -> Result<f64> {
    if n <= k + 1 {
        return Err(Error::DegenerateDof { n, k });
    }
    Ok(1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n as f64 - k as f64 - 1.0))
}

pub fn aic(mse: f64, n: usize, k: usize) -> f64 {
    n as f64 * mse.ln() + 2.0 * (k as f64 + 1.0)
}

pub fn bic(mse: f64, n: usize, k: usize) -> f64 {
    n as f64 * mse.ln() + (k as f64 + 1.0) * (n as f64).ln()
}

pub fn r2_score(y_true: &[f64], y_pred: &[f64]) -> f64 {
    let m = linalg::mean(y_true);
    let sse: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (y - p).powi(2)).sum();
    let sst: f64 = y_true.iter().map(|y| (y - m).powi(2)).sum();
    if sst == 0.0 {
        if sse == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - sse / sst
    }
}

pub fn regression_metrics(y_true: &[f64], y_pred: &[f64], k_effective: usize) -> Result<RegressionReport> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape {
            expected: y_true.len(),
            got: y_pred.len(),
        });
    }
    let n = y_true.len();
    if n < 2 {
        return Err(Error::InsufficientItems(n));
    }
    if y_true.iter().chain(y_pred).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("regression metrics input".into()));
    }
    let nf = n as f64;
    let r2 = r2_score(y_true, y_pred);
    let adjusted_r2 = adjusted_r2(r2, n, k_effective)?;
    let mae = y_true.iter().zip(y_pred).map(|(y, p)| (y - p).abs()).sum::<f64>() / nf;
    let mse = y_true.iter().zip(y_pred).map(|(y, p)| (y - p).powi(2)).sum::<f64>() / nf;
    let mape_pct = if y_true.iter().any(|&y| y == 0.0) {
        None
    } else {
        Some(
            y_true
                .iter()
                .zip(y_pred)
                .map(|(y, p)| ((y - p) / y).abs())
                .sum::<f64>()
                / nf
                * 100.0,
        )
    };
    Ok(RegressionReport {
        r2,
        adjusted_r2,
        mae,
        mse,
        rmse: mse.sqrt(),
        mape_pct,
        aic: aic(mse, n, k_effective),
        bic: bic(mse, n, k_effective),
        n,
        k_effective,
    })
}

/// Principal components of column-standardized data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pca {
    /// One row per component, over the kept columns.
    pub components: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
    pub kept_columns: Vec<usize>,
    /// Constant columns that were dropped before decomposition.
    pub dropped_columns: Vec<usize>,
    means: Vec<f64>,
    scales: Vec<f64>,
}

impl Pca {
    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = self
            .kept_columns
            .iter()
            .zip(self.means.iter().zip(&self.scales))
            .map(|(&j, (m, s))| (row[j] - m) / s)
            .collect();
        self.components
            .iter()
            .map(|c| c.iter().zip(&z).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn transform(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.transform_row(r)).collect()
    }
}

pub fn pca(x: &[Vec<f64>], n_components: usize) -> Result<Pca> {
    let n = x.len();
    let p = x.first().map_or(0, Vec::len);
    if n_components == 0 || n_components > n.min(p) {
        return Err(Error::config(format!(
            "n_components = {n_components} with {n} rows and {p} columns"
        )));
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut means = Vec::new();
    let mut scales = Vec::new();
    for j in 0..p {
        let (m, s) = mean_std(&linalg::column(x, j));
        if s > 0.0 && s.is_finite() {
            kept.push(j);
            means.push(m);
            scales.push(s);
        } else {
            log::warn!("pca: dropping constant column {j}");
            dropped.push(j);
        }
    }
    if kept.is_empty() {
        return Err(Error::Degenerate("all columns constant".into()));
    }
    let q = kept.len();
    let z = DMatrix::from_fn(n, q, |i, k| (x[i][kept[k]] - means[k]) / scales[k]);
    let cov = (z.transpose() * &z) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();

    let take = n_components.min(q);
    let mut components = Vec::with_capacity(take);
    let mut ratios = Vec::with_capacity(take);
    for &k in order.iter().take(take) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        // sign convention: largest-magnitude loading is positive
        let pivot = v
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(1.0);
        if pivot < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        components.push(v);
        ratios.push(eig.eigenvalues[k].max(0.0) / total);
    }
    Ok(Pca {
        components,
        explained_variance_ratio: ratios,
        kept_columns: kept,
        dropped_columns: dropped,
        means,
        scales,
    })
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "ks_statistic needs non-empty samples");
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

pub fn ci_halfwidth(sigma: f64, n: usize, z: f64) -> f64 {
    assert!(n >= 1, "ci_halfwidth needs n >= 1");
    z * sigma / (n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiPoint {
    pub n: usize,
    pub halfwidth: f64,
    /// Central second difference of the half-width over the grid; `None` at the ends.
    pub second_difference: Option<f64>,
}

/// Half-width over an ascending, evenly spaced sample-size grid, with its
/// second difference (per unit n²).
pub fn ci_curve(sigma: f64, z: f64, grid: &[usize]) -> Vec<CiPoint> {
    let hw: Vec<f64> = grid.iter().map(|&n| ci_halfwidth(sigma, n, z)).collect();
    (0..grid.len())
        .map(|i| {
            let second_difference = (i > 0 && i + 1 < grid.len()).then(|| {
                let h = (grid[i + 1] - grid[i - 1]) as f64 / 2.0;
                (hw[i + 1] - 2.0 * hw[i] + hw[i - 1]) / (h * h)
            });
            CiPoint {
                n: grid[i],
                halfwidth: hw[i],
                second_difference,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        Some(self.values[i][j])
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (linalg::mean(x), linalg::mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

pub fn is_constant(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

pub fn pearson_matrix(columns: &[(String, Vec<f64>)]) -> Result<CorrelationMatrix> {
    let n = columns.first().map_or(0, |c| c.1.len());
    if n < 3 {
        return Err(Error::InsufficientItems(n));
    }
    for (name, col) in columns {
        if col.len() != n {
            return Err(Error::Shape {
                expected: n,
                got: col.len(),
            });
        }
        if is_constant(col) {
            return Err(Error::ConstantColumn(name.clone()));
        }
    }
    let k = columns.len();
    let mut values = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let r = pearson(&columns[i].1, &columns[j].1);
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix {
        names: columns.iter().map(|c| c.0.clone()).collect(),
        values,
    })
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Variance inflation factor of every column. Perfectly explained columns
/// report `f64::INFINITY`.
pub fn vif(x: &[Vec<f64>]) -> Result<Vec<f64>> {
    let p = x.first().map_or(0, Vec::len);
    if p < 2 {
        return Err(Error::config("vif needs at least 2 columns"));
    }
    let n = x.len();
    (0..p)
        .map(|j| {
            let y = linalg::column(x, j);
            let others = DMatrix::from_fn(n, p - 1, |i, k| x[i][if k < j { k } else { k + 1 }]);
            let fit = linalg::least_squares_pinv(&others, &y)?;
            let pred: Vec<f64> = (0..n)
                .map(|i| fit.predict_row(&others.row(i).iter().copied().collect::<Vec<_>>()))
                .collect();
            let r2 = r2_score(&y, &pred);
            Ok(if r2 >= 1.0 - 1e-10 {
                f64::INFINITY
            } else {
                1.0 / (1.0 - r2)
            })
        })
        .collect()
}
