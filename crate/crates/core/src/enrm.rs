//! Elastic-net inference models.
//!
//! Objective, on population-standardized features `z` with an unpenalized
//! intercept:
//!
//! ```text
//! (1/2m) Σ (y − b0 − zβ)² + λ1 ‖β‖₁ + λ2 ‖β‖²,   λ1 = α·r,  λ2 = α(1 − r)/2
//! ```
//!
//! so `r = 0` is ordinary ridge with penalty `α/2 ‖β‖²`.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::IndicatorScores;
use crate::error::{Error, Result};
use crate::indicator::{Indicator, Vpi, VPI_COUNT};
use crate::linalg::mean_std;
use crate::stats::{self, RegressionReport};

pub const CONVENTION: &str =
    "(1/2m)*sum((y - b0 - z*beta)^2) + l1*|beta|_1 + l2*|beta|_2^2, l1 = alpha*l1_ratio, \
     l2 = alpha*(1 - l1_ratio)/2; z = population-standardized features; b0 unpenalized";

/// Coefficients with |β| at or below this are treated as zero.
pub const ZERO_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetModel {
    pub feature_names: Vec<String>,
    /// Coefficients on standardized features.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub alpha: f64,
    pub l1_ratio: f64,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub converged: bool,
    pub sweeps: usize,
    pub convention: String,
}

impl ElasticNetModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut acc = self.intercept;
        for j in 0..self.coefficients.len() {
            acc += self.coefficients[j] * (row[j] - self.means[j]) / self.scales[j];
        }
        acc
    }

    pub fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let p = self.coefficients.len();
        rows.iter()
            .map(|r| {
                if r.len() != p {
                    return Err(Error::Shape {
                        expected: p,
                        got: r.len(),
                    });
                }
                Ok(self.predict_row(r))
            })
            .collect()
    }

    /// Predicts from rows whose columns are named by `names`, in any order.
    pub fn predict_named(&self, names: &[String], rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let pos: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let order: Vec<usize> = self
            .feature_names
            .iter()
            .map(|n| {
                pos.get(n.as_str())
                    .copied()
                    .ok_or_else(|| Error::Schema(format!("missing feature {n}")))
            })
            .collect::<Result<_>>()?;
        let reordered: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| order.iter().map(|&i| r[i]).collect())
            .collect();
        self.predict(&reordered)
    }

    pub fn nonzero_count(&self) -> usize {
        self.coefficients.iter().filter(|b| b.abs() > ZERO_THRESHOLD).count()
    }

    /// Coefficients mapped back onto raw feature units, with the matching
    /// intercept.
    pub fn raw_coefficients(&self) -> (f64, Vec<f64>) {
        let coefs: Vec<f64> = self
            .coefficients
            .iter()
            .zip(&self.scales)
            .map(|(b, s)| b / s)
            .collect();
        let intercept = self.intercept - coefs.iter().zip(&self.means).map(|(b, m)| b * m).sum::<f64>();
        (intercept, coefs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-10,
            max_iter: 100_000,
        }
    }
}

/// Standardized problem in Gram form, shared by every alpha on a path.
struct Problem {
    means: Vec<f64>,
    scales: Vec<f64>,
    y_mean: f64,
    /// Z'Z/m
    gram: Vec<Vec<f64>>,
    /// Z'(y − ȳ)/m
    zy: Vec<f64>,
    /// (y − ȳ)'(y − ȳ)/m
    yy: f64,
}

fn check_inputs(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InsufficientItems(x.len()));
    }
    let p = x[0].len();
    if let Some(bad) = x.iter().find(|r| r.len() != p) {
        return Err(Error::Shape {
            expected: p,
            got: bad.len(),
        });
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in elastic-net input".into()));
    }
    Ok(p)
}

impl Problem {
    fn new(x: &[Vec<f64>], y: &[f64]) -> Result<Problem> {
        let p = check_inputs(x, y)?;
        let m = x.len();
        let mut means = Vec::with_capacity(p);
        let mut scales = Vec::with_capacity(p);
        for j in 0..p {
            let col: Vec<f64> = x.iter().map(|r| r[j]).collect();
            let (mu, sd) = mean_std(&col);
            means.push(mu);
            // constant columns get unit scale; their z is identically zero
            scales.push(if sd > 0.0 { sd } else { 1.0 });
        }
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|r| (0..p).map(|j| (r[j] - means[j]) / scales[j]).collect())
            .collect();
        let (y_mean, _) = mean_std(y);
        let yc: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
        let mf = m as f64;
        let mut gram = vec![vec![0.0; p]; p];
        for row in &z {
            for a in 0..p {
                let za = row[a];
                if za == 0.0 {
                    continue;
                }
                for b in a..p {
                    gram[a][b] += za * row[b];
                }
            }
        }
        for a in 0..p {
            for b in a..p {
                gram[a][b] /= mf;
                gram[b][a] = gram[a][b];
            }
        }
        let zy = (0..p)
            .map(|j| z.iter().zip(&yc).map(|(r, v)| r[j] * v).sum::<f64>() / mf)
            .collect();
        let yy = yc.iter().map(|v| v * v).sum::<f64>() / mf;
        Ok(Problem {
            means,
            scales,
            y_mean,
            gram,
            zy,
            yy,
        })
    }

    fn p(&self) -> usize {
        self.zy.len()
    }

    /// Objective value for coefficients `beta`.
    fn objective(&self, beta: &[f64], alpha: f64, l1_ratio: f64) -> f64 {
        let p = self.p();
        let mut quad = 0.0;
        for a in 0..p {
            if beta[a] == 0.0 {
                continue;
            }
            let ga: f64 = (0..p).map(|b| self.gram[a][b] * beta[b]).sum();
            quad += beta[a] * ga;
        }
        let lin: f64 = beta.iter().zip(&self.zy).map(|(b, c)| b * c).sum();
        let l1: f64 = beta.iter().map(|b| b.abs()).sum();
        let l2: f64 = beta.iter().map(|b| b * b).sum();
        0.5 * (self.yy - 2.0 * lin + quad) + alpha * l1_ratio * l1 + alpha * (1.0 - l1_ratio) / 2.0 * l2
    }

    /// Cyclic coordinate descent from `beta` (warm start). Returns
    /// (converged, sweeps, objective after each sweep).
    fn solve(
        &self,
        beta: &mut [f64],
        alpha: f64,
        l1_ratio: f64,
        solver: &SolverConfig,
        track_objective: bool,
    ) -> (bool, usize, Vec<f64>) {
        let p = self.p();
        let l1 = alpha * l1_ratio;
        let denom_extra = alpha * (1.0 - l1_ratio);
        // q = G β
        let mut q: Vec<f64> = (0..p)
            .map(|a| (0..p).map(|b| self.gram[a][b] * beta[b]).sum())
            .collect();
        let mut trace = Vec::new();
        let mut prev_obj = if track_objective || cfg!(debug_assertions) {
            self.objective(beta, alpha, l1_ratio)
        } else {
            f64::NAN
        };
        for sweep in 1..=solver.max_iter {
            let mut max_change: f64 = 0.0;
            for j in 0..p {
                let gjj = self.gram[j][j];
                if gjj == 0.0 {
                    beta[j] = 0.0;
                    continue;
                }
                let rho = self.zy[j] - q[j] + gjj * beta[j];
                let new = soft_threshold(rho, l1) / (gjj + denom_extra);
                let delta = new - beta[j];
                if delta != 0.0 {
                    for (qa, g) in q.iter_mut().zip(&self.gram[j]) {
                        *qa += delta * g;
                    }
                    beta[j] = new;
                    max_change = max_change.max(delta.abs());
                }
            }
            if track_objective || cfg!(debug_assertions) {
                let obj = self.objective(beta, alpha, l1_ratio);
                debug_assert!(
                    obj <= prev_obj + 1e-12 * (1.0 + prev_obj.abs()),
                    "objective rose: {prev_obj} -> {obj}"
                );
                prev_obj = obj;
                if track_objective {
                    trace.push(obj);
                }
            }
            if max_change < solver.tol {
                return (true, sweep, trace);
            }
        }
        (false, solver.max_iter, trace)
    }

    fn model(&self, names: &[String], beta: Vec<f64>, alpha: f64, l1_ratio: f64, converged: bool, sweeps: usize) -> ElasticNetModel {
        let coefficients = beta
            .into_iter()
            .map(|b| if b.abs() > ZERO_THRESHOLD { b } else { 0.0 })
            .collect();
        ElasticNetModel {
            feature_names: names.to_vec(),
            coefficients,
            intercept: self.y_mean,
            alpha,
            l1_ratio,
            means: self.means.clone(),
            scales: self.scales.clone(),
            converged,
            sweeps,
            convention: CONVENTION.to_string(),
        }
    }
}

pub fn soft_threshold(x: f64, lambda: f64) -> f64 {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        0.0
    }
}

fn check_penalty(alpha: f64, l1_ratio: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    if !(0.0..=1.0).contains(&l1_ratio) {
        return Err(Error::config(format!("l1_ratio must lie in [0, 1], got {l1_ratio}")));
    }
    Ok(())
}

fn default_names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("x{j}")).collect()
}

pub fn fit_elastic_net(
    x: &[Vec<f64>],
    y: &[f64],
    alpha: f64,
    l1_ratio: f64,
    solver: &SolverConfig,
) -> Result<ElasticNetModel> {
    fit_elastic_net_named(x, y, None, alpha, l1_ratio, solver)
}

pub fn fit_elastic_net_named(
    x: &[Vec<f64>],
    y: &[f64],
    names: Option<&[String]>,
    alpha: f64,
    l1_ratio: f64,
    solver: &SolverConfig,
) -> Result<ElasticNetModel> {
    check_penalty(alpha, l1_ratio)?;
    let prob = Problem::new(x, y)?;
    let names = names.map(<[String]>::to_vec).unwrap_or_else(|| default_names(prob.p()));
    if names.len() != prob.p() {
        return Err(Error::Shape {
            expected: prob.p(),
            got: names.len(),
        });
    }
    let mut beta = vec![0.0; prob.p()];
    let (converged, sweeps, _) = prob.solve(&mut beta, alpha, l1_ratio, solver, false);
    if !converged {
        log::warn!("elastic net did not converge in {sweeps} sweeps (alpha = {alpha})");
    }
    Ok(prob.model(&names, beta, alpha, l1_ratio, converged, sweeps))
}

/// Objective value after every coordinate sweep, from a zero start.
pub fn objective_trace(
    x: &[Vec<f64>],
    y: &[f64],
    alpha: f64,
    l1_ratio: f64,
    solver: &SolverConfig,
) -> Result<Vec<f64>> {
    check_penalty(alpha, l1_ratio)?;
    let prob = Problem::new(x, y)?;
    let mut beta = vec![0.0; prob.p()];
    let initial = prob.objective(&beta, alpha, l1_ratio);
    let (_, _, mut trace) = prob.solve(&mut beta, alpha, l1_ratio, solver, true);
    trace.insert(0, initial);
    Ok(trace)
}

/// Objective of a fitted model on its own training data.
pub fn objective_value(model: &ElasticNetModel, x: &[Vec<f64>], y: &[f64]) -> Result<f64> {
    let pred = model.predict(x)?;
    let m = y.len() as f64;
    let rss: f64 = y.iter().zip(&pred).map(|(a, b)| (a - b).powi(2)).sum();
    let l1: f64 = model.coefficients.iter().map(|b| b.abs()).sum();
    let l2: f64 = model.coefficients.iter().map(|b| b * b).sum();
    Ok(rss / (2.0 * m)
        + model.alpha * model.l1_ratio * l1
        + model.alpha * (1.0 - model.l1_ratio) / 2.0 * l2)
}

/// Models along an alpha path, each warm-started from the previous (larger)
/// alpha. Returned in the order of `alphas`.
pub fn fit_path(
    x: &[Vec<f64>],
    y: &[f64],
    alphas: &[f64],
    l1_ratio: f64,
    solver: &SolverConfig,
) -> Result<Vec<ElasticNetModel>> {
    for &a in alphas {
        check_penalty(a, l1_ratio)?;
    }
    let prob = Problem::new(x, y)?;
    let names = default_names(prob.p());
    let mut order: Vec<usize> = (0..alphas.len()).collect();
    order.sort_by(|&a, &b| alphas[b].total_cmp(&alphas[a]));
    let mut beta = vec![0.0; prob.p()];
    let mut out: Vec<Option<ElasticNetModel>> = vec![None; alphas.len()];
    for i in order {
        let (converged, sweeps, _) = prob.solve(&mut beta, alphas[i], l1_ratio, solver, false);
        out[i] = Some(prob.model(&names, beta.clone(), alphas[i], l1_ratio, converged, sweeps));
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

/// `n` log-spaced values from 10^lo to 10^hi.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![10f64.powf(lo)];
    }
    (0..n)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnrmConfig {
    pub alpha_grid: Vec<f64>,
    pub l1_ratio: f64,
    pub folds: usize,
    pub seed: u64,
    pub solver: SolverConfig,
    /// Held-out fraction for the labeled train/test evaluation.
    pub test_fraction: f64,
}

impl Default for EnrmConfig {
    fn default() -> Self {
        EnrmConfig {
            alpha_grid: logspace(-4.0, 0.0, 25),
            l1_ratio: 0.5,
            folds: 5,
            seed: 0,
            solver: SolverConfig {
                tol: 1e-8,
                max_iter: 20_000,
            },
            test_fraction: 0.2,
        }
    }
}

impl EnrmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_grid.is_empty() || self.alpha_grid.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::config("degenerate alpha grid: needs at least one finite alpha > 0"));
        }
        check_penalty(1.0, self.l1_ratio)?;
        if self.folds < 2 {
            return Err(Error::config("cross-validation needs at least 2 folds"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("test_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub alpha: f64,
    pub cv_r2: f64,
    /// Mean held-out R² per grid alpha, in grid order.
    pub grid_r2: Vec<f64>,
}

fn fold_of(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in idx.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

/// K-fold cross-validated mean R² over the alpha grid; the best alpha wins
/// (ties to the larger alpha).
pub fn cross_validate(x: &[Vec<f64>], y: &[f64], cfg: &EnrmConfig) -> Result<CvResult> {
    cfg.validate()?;
    check_inputs(x, y)?;
    if x.len() < 2 * cfg.folds {
        return Err(Error::InsufficientItems(x.len()));
    }
    let fold = fold_of(x.len(), cfg.folds, cfg.seed);
    let mut sums = vec![0.0; cfg.alpha_grid.len()];
    for f in 0..cfg.folds {
        let split = |keep: bool| -> (Vec<Vec<f64>>, Vec<f64>) {
            (0..x.len())
                .filter(|&i| (fold[i] == f) != keep)
                .map(|i| (x[i].clone(), y[i]))
                .unzip()
        };
        let (xtr, ytr) = split(true);
        let (xte, yte) = split(false);
        let path = fit_path(&xtr, &ytr, &cfg.alpha_grid, cfg.l1_ratio, &cfg.solver)?;
        for (s, m) in sums.iter_mut().zip(&path) {
            *s += stats::r2_score(&yte, &m.predict(&xte)?);
        }
    }
    let grid_r2: Vec<f64> = sums.iter().map(|s| s / cfg.folds as f64).collect();
    let best = (0..grid_r2.len())
        .max_by(|&a, &b| {
            grid_r2[a]
                .total_cmp(&grid_r2[b])
                .then(cfg.alpha_grid[a].total_cmp(&cfg.alpha_grid[b]))
        })
        .unwrap();
    Ok(CvResult {
        alpha: cfg.alpha_grid[best],
        cv_r2: grid_r2[best],
        grid_r2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub name: String,
    pub model: ElasticNetModel,
    pub cv: CvResult,
    pub report: RegressionReport,
    pub significant_coefficients: usize,
    /// Mean VIF over the features with nonzero coefficients; `None` when
    /// fewer than two are nonzero.
    pub mean_vif: Option<f64>,
}

fn mean_vif(model: &ElasticNetModel, x: &[Vec<f64>]) -> Result<Option<f64>> {
    let active: Vec<usize> = (0..model.coefficients.len())
        .filter(|&j| model.coefficients[j].abs() > ZERO_THRESHOLD)
        .collect();
    if active.len() < 2 {
        return Ok(None);
    }
    let sub: Vec<Vec<f64>> = x.iter().map(|r| active.iter().map(|&j| r[j]).collect()).collect();
    let v = stats::vif(&sub)?;
    Ok(Some(v.iter().sum::<f64>() / v.len() as f64))
}

/// CV-selects alpha, refits on all rows and reports in-sample metrics.
pub fn fit_selected(name: &str, x: &[Vec<f64>], y: &[f64], names: &[String], cfg: &EnrmConfig) -> Result<ModelFit> {
    let cv = cross_validate(x, y, cfg)?;
    let model = fit_elastic_net_named(x, y, Some(names), cv.alpha, cfg.l1_ratio, &cfg.solver)?;
    let k = model.nonzero_count();
    let report = stats::regression_metrics(y, &model.predict(x)?, k)?;
    let mean_vif = mean_vif(&model, x)?;
    Ok(ModelFit {
        name: name.to_string(),
        model,
        cv,
        report,
        significant_coefficients: k,
        mean_vif,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageModel {
    /// One model per VPI, in canonical VPI order.
    pub stage1: Vec<ElasticNetModel>,
    /// VATA from the 52 interpretable features followed by the 19 VPIs.
    pub stage2: ElasticNetModel,
}

impl TwoStageModel {
    pub fn predict_vpi(&self, if_row: &[f64]) -> Vec<f64> {
        self.stage1.iter().map(|m| m.predict_row(if_row)).collect()
    }

    /// VATA from features and observed VPIs, or chained through stage 1
    /// when `vpi` is `None`.
    pub fn predict_vata(&self, if_row: &[f64], vpi: Option<&[f64]>) -> f64 {
        let vpi = vpi.map(<[f64]>::to_vec).unwrap_or_else(|| self.predict_vpi(if_row));
        let full: Vec<f64> = if_row.iter().chain(&vpi).copied().collect();
        self.stage2.predict_row(&full)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrmSuite {
    pub if_only: ModelFit,
    pub vpi_only: ModelFit,
    pub two_stage: ModelFit,
    /// Stage-1 fits, one per VPI in canonical order.
    pub stage1: Vec<ModelFit>,
}

impl EnrmSuite {
    pub fn two_stage_model(&self) -> TwoStageModel {
        TwoStageModel {
            stage1: self.stage1.iter().map(|f| f.model.clone()).collect(),
            stage2: self.two_stage.model.clone(),
        }
    }
}

pub fn vpi_names() -> Vec<String> {
    Vpi::ALL.iter().map(|v| v.name().to_string()).collect()
}

fn design(if_rows: &[Vec<f64>], scores: &[IndicatorScores]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
    if if_rows.len() != scores.len() {
        return Err(Error::Shape {
            expected: if_rows.len(),
            got: scores.len(),
        });
    }
    let vpi: Vec<Vec<f64>> = scores.iter().map(|s| s.vpi.to_vec()).collect();
    let both: Vec<Vec<f64>> = if_rows
        .iter()
        .zip(&vpi)
        .map(|(a, b)| a.iter().chain(b).copied().collect())
        .collect();
    let vata = scores.iter().map(|s| s.vata).collect();
    Ok((vpi, both, vata))
}

/// Fits the IF-only, VPI-only and two-stage models plus the 19 stage-1
/// models. `if_rows` and `scores` must be aligned by image.
pub fn fit_suite(if_rows: &[Vec<f64>], if_names: &[String], scores: &[IndicatorScores], cfg: &EnrmConfig) -> Result<EnrmSuite> {
    cfg.validate()?;
    let (vpi, both, vata) = design(if_rows, scores)?;
    let vnames = vpi_names();
    let all_names: Vec<String> = if_names.iter().chain(&vnames).cloned().collect();
    let stage1 = Vpi::ALL
        .par_iter()
        .map(|v| {
            let y: Vec<f64> = scores.iter().map(|s| s.get(Indicator::Vpi(*v))).collect();
            fit_selected(v.name(), if_rows, &y, if_names, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnrmSuite {
        if_only: fit_selected("if_only", if_rows, &vata, if_names, cfg)?,
        vpi_only: fit_selected("vpi_only", &vpi, &vata, &vnames, cfg)?,
        two_stage: fit_selected("two_stage", &both, &vata, &all_names, cfg)?,
        stage1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutReport {
    pub train_size: usize,
    pub test_size: usize,
    pub if_only: RegressionReport,
    pub vpi_only: RegressionReport,
    pub two_stage: RegressionReport,
}

/// Seeded train/test split: fits each VATA model on the train part and
/// reports metrics on the test part (stage 2 uses observed test VPIs).
pub fn held_out_evaluation(
    if_rows: &[Vec<f64>],
    scores: &[IndicatorScores],
    cfg: &EnrmConfig,
) -> Result<HeldOutReport> {
    cfg.validate()?;
    let (vpi, both, vata) = design(if_rows, scores)?;
    let n = vata.len();
    let n_test = ((n as f64) * cfg.test_fraction).round() as usize;
    if n_test < 2 || n - n_test < 2 * cfg.folds {
        return Err(Error::InsufficientItems(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed));
    let (test, train) = idx.split_at(n_test);
    let pick = |rows: &[Vec<f64>], ids: &[usize]| ids.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>();
    let ytr: Vec<f64> = train.iter().map(|&i| vata[i]).collect();
    let yte: Vec<f64> = test.iter().map(|&i| vata[i]).collect();
    let eval = |rows: &[Vec<f64>]| -> Result<RegressionReport> {
        let xtr = pick(rows, train);
        let cv = cross_validate(&xtr, &ytr, cfg)?;
        let m = fit_elastic_net(&xtr, &ytr, cv.alpha, cfg.l1_ratio, &cfg.solver)?;
        stats::regression_metrics(&yte, &m.predict(&pick(rows, test))?, m.nonzero_count())
    };
    Ok(HeldOutReport {
        train_size: train.len(),
        test_size: test.len(),
        if_only: eval(if_rows)?,
        vpi_only: eval(&vpi)?,
        two_stage: eval(&both)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightShare {
    pub feature: String,
    pub coefficient: f64,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SankeyLink {
    pub source: String,
    pub target: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub model: String,
    pub positive: Vec<WeightShare>,
    pub negative: Vec<WeightShare>,
    pub nodes: Vec<String>,
    pub links: Vec<SankeyLink>,
}

fn shares(pairs: Vec<(&String, f64)>) -> Vec<WeightShare> {
    let total: f64 = pairs.iter().map(|(_, c)| c.abs()).sum();
    let mut out: Vec<WeightShare> = pairs
        .into_iter()
        .map(|(f, c)| WeightShare {
            feature: f.clone(),
            coefficient: c,
            proportion: c.abs() / total,
        })
        .collect();
    out.sort_by(|a, b| b.proportion.total_cmp(&a.proportion).then_with(|| a.feature.cmp(&b.feature)));
    out
}

/// Splits coefficients by sign and normalizes each side to proportions.
pub fn weight_report(name: &str, model: &ElasticNetModel) -> Result<WeightReport> {
    let nz: Vec<(&String, f64)> = model
        .feature_names
        .iter()
        .zip(&model.coefficients)
        .filter(|(_, c)| c.abs() > ZERO_THRESHOLD)
        .map(|(f, c)| (f, *c))
        .collect();
    if nz.is_empty() {
        return Err(Error::EmptyModel);
    }
    let (pos, neg): (Vec<_>, Vec<_>) = nz.into_iter().partition(|(_, c)| *c > 0.0);
    let positive = shares(pos);
    let negative = shares(neg);
    let mut nodes: Vec<String> = positive.iter().chain(&negative).map(|s| s.feature.clone()).collect();
    nodes.push("positive".into());
    nodes.push("negative".into());
    let links = positive
        .iter()
        .map(|s| (s, "positive"))
        .chain(negative.iter().map(|s| (s, "negative")))
        .map(|(s, bucket)| SankeyLink {
            source: s.feature.clone(),
            target: bucket.to_string(),
            value: s.proportion,
        })
        .collect();
    Ok(WeightReport {
        model: name.to_string(),
        positive,
        negative,
        nodes,
        links,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCorrelation {
    pub name: String,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRanking {
    /// VPIs by Pearson r with VATA, descending.
    pub vata_vs_vpi: Vec<RankedCorrelation>,
    /// Per VPI, the six features with the largest |r|.
    pub top_features: BTreeMap<String, Vec<RankedCorrelation>>,
    /// Constant series left out of the rankings.
    pub excluded: Vec<String>,
}

pub const TOP_FEATURES: usize = 6;

pub fn correlation_ranking(
    scores: &[IndicatorScores],
    if_names: &[String],
    if_rows: &[Vec<f64>],
) -> Result<CorrelationRanking> {
    if scores.len() < 3 {
        return Err(Error::InsufficientItems(scores.len()));
    }
    if if_rows.len() != scores.len() {
        return Err(Error::Shape {
            expected: scores.len(),
            got: if_rows.len(),
        });
    }
    let mut excluded = Vec::new();
    let vata: Vec<f64> = scores.iter().map(|s| s.vata).collect();
    let vata_ok = !stats::is_constant(&vata);
    if !vata_ok {
        log::warn!("VATA scores are constant; VATA-vs-VPI ranking is empty");
        excluded.push("vata".to_string());
    }
    let mut vpis: Vec<(Vpi, Vec<f64>)> = Vec::new();
    for v in Vpi::ALL {
        let col: Vec<f64> = scores.iter().map(|s| s.get(Indicator::Vpi(v))).collect();
        if stats::is_constant(&col) {
            log::warn!("VPI {v} is constant; excluded from correlation rankings");
            excluded.push(v.name().to_string());
        } else {
            vpis.push((v, col));
        }
    }
    let mut features: Vec<(&String, Vec<f64>)> = Vec::new();
    for (j, name) in if_names.iter().enumerate() {
        let col: Vec<f64> = if_rows.iter().map(|r| r[j]).collect();
        if stats::is_constant(&col) {
            log::warn!("feature {name} is constant; excluded from correlation rankings");
            excluded.push(name.clone());
        } else {
            features.push((name, col));
        }
    }
    let mut vata_vs_vpi: Vec<RankedCorrelation> = if vata_ok {
        vpis.iter()
            .map(|(v, col)| RankedCorrelation {
                name: v.name().to_string(),
                r: stats::pearson(&vata, col),
            })
            .collect()
    } else {
        Vec::new()
    };
    vata_vs_vpi.sort_by(|a, b| b.r.total_cmp(&a.r).then_with(|| a.name.cmp(&b.name)));
    let top_features = vpis
        .iter()
        .map(|(v, col)| {
            let mut ranked: Vec<RankedCorrelation> = features
                .iter()
                .map(|(name, f)| RankedCorrelation {
                    name: (*name).clone(),
                    r: stats::pearson(col, f),
                })
                .collect();
            ranked.sort_by(|a, b| b.r.abs().total_cmp(&a.r.abs()).then_with(|| a.name.cmp(&b.name)));
            ranked.truncate(TOP_FEATURES);
            (v.name().to_string(), ranked)
        })
        .collect();
    debug_assert_eq!(vpis.len() + excluded.iter().filter(|e| Vpi::ALL.iter().any(|v| v.name() == *e)).count(), VPI_COUNT);
    Ok(CorrelationRanking {
        vata_vs_vpi,
        top_features,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn tight() -> SolverConfig {
        SolverConfig {
            tol: 1e-13,
            max_iter: 1_000_000,
        }
    }

    fn random_problem(n: usize, p: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|j| (j as f64 + 1.0) * rng.sample::<f64, _>(StandardNormal) + j as f64).collect())
            .collect();
        let y = x
            .iter()
            .map(|r| 1.0 + r.iter().enumerate().map(|(j, v)| v * (j as f64 - 2.0) * 0.3).sum::<f64>() + rng.sample::<f64, _>(StandardNormal))
            .collect();
        (x, y)
    }

    fn standardize(x: &[Vec<f64>]) -> DMatrix<f64> {
        let (n, p) = (x.len(), x[0].len());
        let mut z = DMatrix::zeros(n, p);
        for j in 0..p {
            let col: Vec<f64> = x.iter().map(|r| r[j]).collect();
            let (m, s) = mean_std(&col);
            for i in 0..n {
                z[(i, j)] = (x[i][j] - m) / s;
            }
        }
        z
    }

    #[test]
    fn exact_line_with_zero_alpha() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0]];
        let m = fit_elastic_net(&x, &[0.0, 1.0, 2.0], 0.0, 0.5, &tight()).unwrap();
        let (b0, b) = m.raw_coefficients();
        assert!((b[0] - 1.0).abs() < 1e-8);
        assert!(b0.abs() < 1e-8);
    }

    #[test]
    fn full_shrinkage() {
        let (x, y) = random_problem(30, 4, 1);
        let m = fit_elastic_net(&x, &y, 1e6, 1.0, &tight()).unwrap();
        assert!(m.coefficients.iter().all(|b| *b == 0.0));
        assert!((m.intercept - crate::linalg::mean(&y)).abs() < 1e-12);
    }

    #[test]
    fn ridge_matches_closed_form() {
        let (x, y) = random_problem(40, 5, 2);
        let alpha = 0.1;
        let m = fit_elastic_net(&x, &y, alpha, 0.0, &tight()).unwrap();
        let z = standardize(&x);
        let ym = crate::linalg::mean(&y);
        let yc = DVector::from_iterator(40, y.iter().map(|v| v - ym));
        let lhs = z.transpose() * &z / 40.0 + DMatrix::identity(5, 5) * alpha;
        let rhs = z.transpose() * yc / 40.0;
        let beta = lhs.lu().solve(&rhs).unwrap();
        for j in 0..5 {
            assert!((m.coefficients[j] - beta[j]).abs() < 1e-6, "{j}: {} vs {}", m.coefficients[j], beta[j]);
        }
    }

    #[test]
    fn zero_alpha_matches_ols() {
        let (x, y) = random_problem(60, 5, 3);
        let m = fit_elastic_net(&x, &y, 0.0, 0.5, &tight()).unwrap();
        let xm = DMatrix::from_fn(60, 5, |i, j| x[i][j]);
        let ols = crate::linalg::least_squares(&xm, &y, 1e12).unwrap();
        let (b0, b) = m.raw_coefficients();
        assert!((b0 - ols.intercept).abs() < 1e-6);
        for j in 0..5 {
            assert!((b[j] - ols.coefficients[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn objective_never_rises_over_instances() {
        for seed in 0..100 {
            let (x, y) = random_problem(40, 6, 100 + seed);
            let alpha = 0.01 + (seed as f64) * 0.01;
            let trace = objective_trace(&x, &y, alpha, 0.5, &SolverConfig::default()).unwrap();
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs()), "seed {seed}");
            }
        }
    }

    #[test]
    fn stored_standardization_reproduces_predictions() {
        let (x, y) = random_problem(50, 4, 5);
        let m = fit_elastic_net(&x, &y, 0.05, 0.5, &SolverConfig::default()).unwrap();
        let a = m.predict(&x).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: ElasticNetModel = serde_json::from_str(&json).unwrap();
        assert_eq!(a, back.predict(&x).unwrap());
    }

    #[test]
    fn named_prediction_ignores_column_order() {
        let (x, y) = random_problem(50, 4, 6);
        let names: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let m = fit_elastic_net_named(&x, &y, Some(&names), 0.05, 0.5, &SolverConfig::default()).unwrap();
        let perm = [2, 0, 3, 1];
        let pn: Vec<String> = perm.iter().map(|&i| names[i].clone()).collect();
        let px: Vec<Vec<f64>> = x.iter().map(|r| perm.iter().map(|&i| r[i]).collect()).collect();
        assert_eq!(m.predict(&x).unwrap(), m.predict_named(&pn, &px).unwrap());
    }

    #[test]
    fn non_finite_input_rejected() {
        let x = vec![vec![0.0], vec![f64::NAN]];
        assert!(matches!(fit_elastic_net(&x, &[1.0, 2.0], 0.1, 0.5, &tight()), Err(Error::Numeric(_))));
    }

    #[test]
    fn degenerate_alpha_grid() {
        let cfg = EnrmConfig {
            alpha_grid: vec![],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = EnrmConfig {
            alpha_grid: vec![0.1, -1.0],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn weight_report_examples() {
        let model = |coefs: Vec<f64>| ElasticNetModel {
            feature_names: (0..coefs.len()).map(|i| format!("f{i}")).collect(),
            means: vec![0.0; coefs.len()],
            scales: vec![1.0; coefs.len()],
            coefficients: coefs,
            intercept: 0.0,
            alpha: 0.1,
            l1_ratio: 0.5,
            converged: true,
            sweeps: 1,
            convention: CONVENTION.into(),
        };
        let r = weight_report("m", &model(vec![2.0, 2.0, -1.0])).unwrap();
        assert_eq!(r.positive.iter().map(|s| s.proportion).collect::<Vec<_>>(), vec![0.5, 0.5]);
        assert_eq!(r.negative.iter().map(|s| s.proportion).collect::<Vec<_>>(), vec![1.0]);
        assert_eq!(r.links.len(), 3);
        let r = weight_report("m", &model(vec![0.0, 3.0])).unwrap();
        assert_eq!(r.positive[0].proportion, 1.0);
        assert!(r.negative.is_empty());
        assert!(matches!(weight_report("m", &model(vec![0.0, 0.0])), Err(Error::EmptyModel)));
    }

    fn scores_from(vata: &[f64], vpi: impl Fn(usize) -> [f64; VPI_COUNT]) -> Vec<IndicatorScores> {
        vata.iter()
            .enumerate()
            .map(|(i, v)| IndicatorScores {
                image_id: format!("i{i}"),
                vata: *v,
                vpi: vpi(i),
            })
            .collect()
    }

    #[test]
    fn duplicated_vata_ranks_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vata: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..5.0)).collect();
        let noise: Vec<[f64; VPI_COUNT]> = (0..50)
            .map(|_| std::array::from_fn(|_| rng.random_range(0.0..5.0)))
            .collect();
        let scores = scores_from(&vata, |i| {
            let mut v = noise[i];
            v[7] = vata[i];
            v
        });
        let rows: Vec<Vec<f64>> = (0..50).map(|i| (0..8).map(|j| vata[i] * j as f64 + noise[i][j]).collect()).collect();
        let names: Vec<String> = (0..8).map(|j| format!("f{j}")).collect();
        let r = correlation_ranking(&scores, &names, &rows).unwrap();
        assert_eq!(r.vata_vs_vpi[0].name, Vpi::ALL[7].name());
        assert!((r.vata_vs_vpi[0].r - 1.0).abs() < 1e-12);
        assert!(r.top_features.values().all(|t| t.len() == 6));
    }

    #[test]
    fn independent_vpi_is_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 10_000;
        let vata: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let vpi: Vec<[f64; VPI_COUNT]> = (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(0.0..5.0)))
            .collect();
        let scores = scores_from(&vata, |i| vpi[i]);
        let rows: Vec<Vec<f64>> = vata.iter().map(|v| vec![*v]).collect();
        let r = correlation_ranking(&scores, &["f".to_string()], &rows).unwrap();
        assert!(r.vata_vs_vpi.iter().all(|c| c.r.abs() < 0.05));
    }

    #[test]
    fn constant_series_excluded_not_fatal() {
        let vata: Vec<f64> = (0..10).map(|i| i as f64 * 0.5).collect();
        let scores = scores_from(&vata, |i| {
            let mut v = [i as f64 * 0.3; VPI_COUNT];
            v[0] = 2.5;
            v
        });
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64]).collect();
        let r = correlation_ranking(&scores, &["flat".into(), "ramp".into()], &rows).unwrap();
        assert!(r.excluded.contains(&Vpi::ALL[0].name().to_string()));
        assert!(r.excluded.contains(&"flat".to_string()));
        assert_eq!(r.vata_vs_vpi.len(), VPI_COUNT - 1);
    }

    /// Exactly orthogonal, zero-mean ±1 columns: bit j of the row index.
    fn orthogonal_design(bits: usize) -> Vec<Vec<f64>> {
        (0..1usize << bits)
            .map(|i| (0..bits).map(|j| if (i >> j) & 1 == 1 { 1.0 } else { -1.0 }).collect())
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn support_shrinks_with_alpha(seed in 0u64..10_000) {
            let x = orthogonal_design(6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = x.iter().map(|r| r.iter().map(|v| v * rng.random_range(-1.0..1.0)).sum::<f64>() + rng.random_range(-0.5..0.5)).collect();
            let grid = logspace(-3.0, 1.0, 15);
            let path = fit_path(&x, &y, &grid, 0.5, &SolverConfig::default()).unwrap();
            for w in path.windows(2) {
                prop_assert!(w[1].nonzero_count() <= w[0].nonzero_count());
            }
        }
    }
}
