//! Comfort validation: EMA smoothing, VATA-vs-comfort line fits and the
//! multivariate predictor-set comparison.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::ComfortPoint;
use crate::error::{Error, Result};
use crate::linalg::{self, mean_std};
use crate::stats;

/// Gram condition number above which OLS switches to a ridge-stabilized solve.
pub const MAX_CONDITION: f64 = 1e10;

pub const HSNA_NAMES: [&str; 4] = ["heart_rate", "solar", "noise", "altitude"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaSeries {
    pub alpha: f64,
    pub values: Vec<f64>,
}

/// Exponential moving average seeded with the first observation.
pub fn ema(series: &[f64], alpha: f64) -> Result<EmaSeries> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::config(format!("smoothing alpha {alpha} outside (0, 1]")));
    }
    if series.is_empty() {
        return Err(Error::InsufficientItems(0));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in series".into()));
    }
    let mut values = Vec::with_capacity(series.len());
    let mut s = series[0];
    values.push(s);
    for &x in &series[1..] {
        s = alpha * x + (1.0 - alpha) * s;
        values.push(s);
    }
    Ok(EmaSeries { alpha, values })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComfortFit {
    /// `"raw"` or the alpha formatted as a decimal.
    pub label: String,
    pub alpha: Option<f64>,
    pub intercept: f64,
    pub slope: f64,
    pub r2: f64,
    pub adjusted_r2: f64,
    pub n: usize,
}

fn line_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let (mx, sx) = mean_std(x);
    if sx == 0.0 {
        return Err(Error::Degenerate("predictor has zero variance".into()));
    }
    let my = linalg::mean(y);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Ok((my - slope * mx, slope))
}

fn comfort_fit(label: String, alpha: Option<f64>, x: &[f64], y: &[f64]) -> Result<ComfortFit> {
    let (intercept, slope) = line_fit(x, y)?;
    let pred: Vec<f64> = x.iter().map(|v| intercept + slope * v).collect();
    let report = stats::regression_metrics(y, &pred, 1)?;
    Ok(ComfortFit {
        label,
        alpha,
        intercept,
        slope,
        r2: report.r2,
        adjusted_r2: report.adjusted_r2,
        n: y.len(),
    })
}

/// Raw fit followed by one fit per alpha; both series share the alpha.
pub fn fit_vata_comfort(vata: &[f64], comfort: &[f64], alphas: &[f64]) -> Result<Vec<ComfortFit>> {
    if vata.len() != comfort.len() {
        return Err(Error::Shape {
            expected: vata.len(),
            got: comfort.len(),
        });
    }
    if vata.len() < 3 {
        return Err(Error::InsufficientItems(vata.len()));
    }
    let mut out = vec![comfort_fit("raw".into(), None, vata, comfort)?];
    for &a in alphas {
        let x = ema(vata, a)?.values;
        let y = ema(comfort, a)?.values;
        out.push(comfort_fit(format!("{a}"), Some(a), &x, &y)?);
    }
    Ok(out)
}

/// A group of named columns entering a model together.
#[derive(Debug, Clone)]
pub struct PredictorBlock {
    pub name: String,
    pub column_names: Vec<String>,
    /// Column-major: one inner vector per predictor.
    pub columns: Vec<Vec<f64>>,
    /// Replace by leading principal components when wider than n / 3.
    pub reducible: bool,
}

impl PredictorBlock {
    pub fn new(name: &str, columns: Vec<(String, Vec<f64>)>) -> PredictorBlock {
        let (column_names, columns) = columns.into_iter().unzip();
        PredictorBlock {
            name: name.to_string(),
            column_names,
            columns,
            reducible: false,
        }
    }

    pub fn reducible(mut self) -> PredictorBlock {
        self.reducible = true;
        self
    }
}

#[derive(Debug, Clone)]
pub struct PredictorSet {
    pub name: String,
    pub blocks: Vec<PredictorBlock>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultivariateFit {
    pub name: String,
    pub predictors: Vec<String>,
    pub n: usize,
    pub k: usize,
    pub r2: f64,
    pub adjusted_r2: f64,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub condition_number: f64,
    pub ridge_fallback: bool,
}

fn zscore(col: &[f64]) -> Result<Vec<f64>> {
    let (m, s) = mean_std(col);
    if s == 0.0 || !s.is_finite() {
        return Err(Error::Degenerate("predictor has zero variance".into()));
    }
    Ok(col.iter().map(|v| (v - m) / s).collect())
}

/// Builds the z-scored design for one set; reducible blocks wider than
/// `n / 3` become their leading `n / 3` principal component scores.
fn design(set: &PredictorSet, n: usize) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut names = Vec::new();
    let mut cols = Vec::new();
    for block in &set.blocks {
        if let Some(bad) = block.columns.iter().find(|c| c.len() != n) {
            return Err(Error::Shape {
                expected: n,
                got: bad.len(),
            });
        }
        let cap = n / 3;
        if block.reducible && block.columns.len() > cap {
            let rows: Vec<Vec<f64>> = (0..n).map(|i| block.columns.iter().map(|c| c[i]).collect()).collect();
            let pcs = stats::pca(&rows, cap.max(1))?;
            let scores = pcs.transform(&rows);
            for j in 0..pcs.components.len() {
                names.push(format!("{}_pc{}", block.name, j + 1));
                cols.push(zscore(&linalg::column(&scores, j))?);
            }
        } else {
            for (name, c) in block.column_names.iter().zip(&block.columns) {
                names.push(name.clone());
                cols.push(zscore(c)?);
            }
        }
    }
    Ok((names, cols))
}

pub fn fit_set(set: &PredictorSet, comfort: &[f64]) -> Result<MultivariateFit> {
    let n = comfort.len();
    if set.blocks.iter().all(|b| b.columns.is_empty()) {
        return Err(Error::Degenerate(format!("predictor set {} is empty", set.name)));
    }
    let (names, cols) = design(set, n)?;
    let k = cols.len();
    if n <= k + 1 {
        return Err(Error::DegenerateDof { n, k });
    }
    let x = DMatrix::from_fn(n, k, |i, j| cols[j][i]);
    let ls = linalg::least_squares(&x, comfort, MAX_CONDITION)?;
    let pred: Vec<f64> = (0..n)
        .map(|i| ls.intercept + (0..k).map(|j| cols[j][i] * ls.coefficients[j]).sum::<f64>())
        .collect();
    let report = stats::regression_metrics(comfort, &pred, k)?;
    Ok(MultivariateFit {
        name: set.name.clone(),
        predictors: names,
        n,
        k,
        r2: report.r2,
        adjusted_r2: report.adjusted_r2,
        intercept: ls.intercept,
        coefficients: ls.coefficients,
        condition_number: ls.condition_number,
        ridge_fallback: ls.ridge_fallback,
    })
}

/// Fits every set on the raw series and sorts by adjusted R², best first.
pub fn fit_multivariate(sets: &[PredictorSet], comfort: &[f64]) -> Result<Vec<MultivariateFit>> {
    let mut fits = sets.iter().map(|s| fit_set(s, comfort)).collect::<Result<Vec<_>>>()?;
    fits.sort_by(|a, b| b.adjusted_r2.total_cmp(&a.adjusted_r2).then_with(|| a.name.cmp(&b.name)));
    Ok(fits)
}

pub fn hsna_block(points: &[ComfortPoint]) -> PredictorBlock {
    let get: [fn(&ComfortPoint) -> f64; 4] = [|p| p.heart_rate, |p| p.solar, |p| p.noise, |p| p.altitude];
    PredictorBlock::new(
        "HSNA",
        HSNA_NAMES
            .iter()
            .zip(get)
            .map(|(name, f)| (name.to_string(), points.iter().map(f).collect()))
            .collect(),
    )
}

/// The five standard sets: VATA+HSNA, IF+HSNA, HSNA, heart and solar.
/// `if_rows` holds one interpretable-feature row per path point.
pub fn standard_sets(
    points: &[ComfortPoint],
    vata: &[f64],
    if_names: &[String],
    if_rows: &[Vec<f64>],
) -> Result<Vec<PredictorSet>> {
    let n = points.len();
    for len in [vata.len(), if_rows.len()] {
        if len != n {
            return Err(Error::Shape { expected: n, got: len });
        }
    }
    let hsna = hsna_block(points);
    let vata_block = PredictorBlock::new("VATA", vec![("vata".into(), vata.to_vec())]);
    let if_block = PredictorBlock::new(
        "IF",
        if_names
            .iter()
            .enumerate()
            .map(|(j, name)| (name.clone(), linalg::column(if_rows, j)))
            // constant columns carry no signal and would make the z-score fail
            .filter(|(_, c)| !stats::is_constant(c))
            .collect(),
    )
    .reducible();
    let single = |i: usize| PredictorBlock {
        name: HSNA_NAMES[i].to_string(),
        column_names: vec![hsna.column_names[i].clone()],
        columns: vec![hsna.columns[i].clone()],
        reducible: false,
    };
    Ok(vec![
        PredictorSet {
            name: "VATA+HSNA".into(),
            blocks: vec![vata_block, hsna.clone()],
        },
        PredictorSet {
            name: "IF+HSNA".into(),
            blocks: vec![if_block, hsna.clone()],
        },
        PredictorSet {
            name: "HSNA".into(),
            blocks: vec![hsna.clone()],
        },
        PredictorSet {
            name: "heart".into(),
            blocks: vec![single(0)],
        },
        PredictorSet {
            name: "solar".into(),
            blocks: vec![single(1)],
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ema_endpoints() {
        let x = [1.0, 5.0, -2.0, 3.5];
        assert_eq!(ema(&x, 1.0).unwrap().values, x.to_vec());
        assert_eq!(ema(&[4.0; 6], 0.3).unwrap().values, vec![4.0; 6]);
        assert_eq!(ema(&[2.0, 4.0], 0.5).unwrap().values, vec![2.0, 3.0]);
    }

    #[test]
    fn ema_rejects_bad_alpha() {
        for a in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(ema(&[1.0, 2.0], a), Err(Error::Config(_))));
        }
    }

    #[test]
    fn exact_line_has_unit_adjusted_r2() {
        let v: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin() * 2.0 + 2.5).collect();
        let c: Vec<f64> = v.iter().map(|x| 2.0 * x + 1.0).collect();
        let fits = fit_vata_comfort(&v, &c, &[0.3]).unwrap();
        assert!((fits[0].adjusted_r2 - 1.0).abs() < 1e-12);
        assert!((fits[0].slope - 2.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_one_equals_raw() {
        let v: Vec<f64> = (0..30).map(|i| ((i * 7 % 11) as f64).sqrt()).collect();
        let c: Vec<f64> = (0..30).map(|i| ((i * 5 % 13) as f64).ln_1p()).collect();
        let fits = fit_vata_comfort(&v, &c, &[1.0]).unwrap();
        assert_eq!(fits[0].adjusted_r2, fits[1].adjusted_r2);
        assert_eq!(fits[0].slope, fits[1].slope);
    }

    #[test]
    fn constant_predictor_is_degenerate() {
        let err = fit_vata_comfort(&[2.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0], &[]).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
        let set = PredictorSet {
            name: "zero".into(),
            blocks: vec![PredictorBlock::new("z", vec![("z".into(), vec![0.0; 10])])],
        };
        assert!(matches!(fit_set(&set, &[1.0; 10]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn too_few_rows_is_dof_error() {
        let cols: Vec<(String, Vec<f64>)> = (0..4)
            .map(|j| (format!("c{j}"), (0..5).map(|i| ((i * (j + 2)) % 7) as f64).collect()))
            .collect();
        let set = PredictorSet {
            name: "wide".into(),
            blocks: vec![PredictorBlock::new("w", cols)],
        };
        let y = [1.0, 3.0, 2.0, 5.0, 4.0];
        assert!(matches!(fit_set(&set, &y), Err(Error::DegenerateDof { n: 5, k: 4 })));
    }

    #[test]
    fn wide_reducible_block_uses_principal_components() {
        let n = 30;
        let cols: Vec<(String, Vec<f64>)> = (0..20)
            .map(|j| (format!("f{j}"), (0..n).map(|i| ((i * 31 + j * 17) % 23) as f64 + 0.1 * j as f64).collect()))
            .collect();
        let y: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let set = PredictorSet {
            name: "IF".into(),
            blocks: vec![PredictorBlock::new("IF", cols).reducible()],
        };
        let fit = fit_set(&set, &y).unwrap();
        assert_eq!(fit.k, n / 3);
        assert!(fit.predictors[0].starts_with("IF_pc"));
    }

    proptest! {
        #[test]
        fn ema_stays_within_range(xs in prop::collection::vec(-10.0f64..10.0, 1..60), alpha in 0.001f64..=1.0) {
            let s = ema(&xs, alpha).unwrap();
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(s.values.len(), xs.len());
            for v in s.values {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn ema_is_shift_equivariant(xs in prop::collection::vec(-10.0f64..10.0, 1..60), alpha in 0.001f64..=1.0, c in -10.0f64..10.0) {
            let a = ema(&xs, alpha).unwrap().values;
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let b = ema(&shifted, alpha).unwrap().values;
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u + c - v).abs() < 1e-12);
            }
        }
    }
}
