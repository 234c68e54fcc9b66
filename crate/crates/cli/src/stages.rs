//! One function per subcommand. Every stage reads and writes fixed file
//! names inside the work directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use vata_core::data::{
    load_comfort, load_comparisons, load_feature_table, load_json, load_scores, save_comfort, save_comparisons,
    save_feature_table, save_json, save_scores,
};
use vata_core::enrm::{self, TwoStageModel};
use vata_core::geomap::{self, HexGrid};
use vata_core::mtnnl::{self, Activation, Dataset, Evaluation, FoldResult, GradientCheck, MtnnlParams};
use vata_core::sampling::{self, ClusterModel, StratifiedSample};
use vata_core::synth::{self, LatentTruth};
use vata_core::trueskill::{self, IndicatorDiagnostics};
use vata_core::validation;
use vata_core::{
    interpretable_names, stats, Error, FeatureTable, ImageManifest, Indicator, IndicatorScores, RegressionReport,
    Result, VPI_COUNT,
};

use crate::config::Config;

pub const FEATURES: &str = "features.csv";
pub const COMPARISONS: &str = "comparisons.jsonl";
pub const COMFORT: &str = "comfort.csv";
pub const LATENT: &str = "latent-truth.json";
pub const CLUSTER_REPORT: &str = "cluster-report.json";
pub const MANIFEST: &str = "manifest.json";
pub const SAMPLE: &str = "sample.json";
pub const COVERAGE: &str = "coverage.json";
pub const SCORES: &str = "scores.csv";
pub const SCORES_DIR: &str = "scores";
pub const SCORE_DIAGNOSTICS: &str = "score-diagnostics.json";
pub const CONVERGENCE: &str = "convergence.json";
pub const ENRM_MODELS: &str = "enrm-models.json";
pub const ENRM_TWO_STAGE: &str = "enrm-two-stage.json";
pub const ENRM_METRICS: &str = "enrm-metrics.json";
pub const ENRM_WEIGHTS: &str = "enrm-weights.json";
pub const ENRM_CORRELATIONS: &str = "enrm-correlations.json";
pub const MTNNL_PARAMS: &str = "mtnnl-params.json";
pub const MTNNL_HISTORY: &str = "mtnnl-history.csv";
pub const MTNNL_GRADIENT_CHECK: &str = "mtnnl-gradient-check.json";
pub const MTNNL_EVAL: &str = "mtnnl-eval.json";
pub const PREDICTIONS: &str = "predictions.csv";
pub const VALIDATION: &str = "validation.json";
pub const MAP: &str = "map.geojson";
pub const SUMMARY: &str = "summary.json";
pub const SURVEY_LOG: &str = "survey-log.jsonl";

pub const REPORT_SCHEMA: &str = "vata-report/1";

/// Reports collated by `report`, keyed by their name in the summary.
const REPORTS: [(&str, &str); 10] = [
    ("cluster", CLUSTER_REPORT),
    ("coverage", COVERAGE),
    ("score_diagnostics", SCORE_DIAGNOSTICS),
    ("convergence", CONVERGENCE),
    ("enrm_metrics", ENRM_METRICS),
    ("enrm_weights", ENRM_WEIGHTS),
    ("enrm_correlations", ENRM_CORRELATIONS),
    ("mtnnl_eval", MTNNL_EVAL),
    ("mtnnl_gradient_check", MTNNL_GRADIENT_CHECK),
    ("validation", VALIDATION),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LatentFile {
    truth: LatentTruth,
    survey_ids: Vec<String>,
    latent: Vec<IndicatorScores>,
}

/// Trained network plus the input block it expects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBundle {
    pub use_embedding: bool,
    pub seed: u64,
    pub params: MtnnlParams,
}

fn zeroed(id: &str) -> IndicatorScores {
    IndicatorScores {
        image_id: id.to_string(),
        vata: 0.0,
        vpi: [0.0; VPI_COUNT],
    }
}

fn cluster_points(table: &FeatureTable, cfg: &Config) -> Result<ClusterModel> {
    let rows: Vec<Vec<f64>> = table.features.iter().map(|f| f.segmentation.clone()).collect();
    sampling::kmeans(&rows, &cfg.cluster)
}

fn labels_of(table: &FeatureTable) -> Result<Vec<usize>> {
    table
        .records
        .iter()
        .map(|r| {
            r.cluster_label.ok_or_else(|| {
                Error::Schema(format!("{} has no cluster label; run `vata cluster` first", r.image_id))
            })
        })
        .collect()
}

fn if_rows_for(table: &FeatureTable, ids: &[&str]) -> Result<Vec<Vec<f64>>> {
    let by_id: HashMap<&str, _> = table.features.iter().map(|f| (f.image_id.as_str(), f)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id)
                .map(|f| f.interpretable().to_vec())
                .ok_or_else(|| Error::UnknownImage(id.to_string()))
        })
        .collect()
}

pub fn synth(cfg: &Config, wd: &Path) -> Result<()> {
    let s = &cfg.synth;
    let pop = synth::generate_population(&s.population)?;
    let mut records = pop.records.clone();
    for r in &mut records {
        r.cluster_label = None;
    }
    let table = FeatureTable {
        records,
        features: pop.features.clone(),
    };
    save_feature_table(&table, wd.join(FEATURES))?;

    // the survey covers exactly the images `cluster` + `sample` will pick
    let table = load_feature_table(wd.join(FEATURES))?;
    let model = cluster_points(&table, cfg)?;
    let sample = sampling::stratified_sample(&table.ids(), &model.labels, cfg.sample.n_per_class, cfg.seed)?;
    let by_id: HashMap<&str, &IndicatorScores> = pop.latent.iter().map(|l| (l.image_id.as_str(), l)).collect();
    let surveyed: Vec<IndicatorScores> = sample.ids.iter().map(|id| by_id[id.as_str()].clone()).collect();
    let comparisons =
        synth::simulate_survey(&surveyed, s.pairs_per_indicator, s.population.rater_noise_beta, cfg.seed)?;
    save_comparisons(&comparisons, wd.join(COMPARISONS))?;

    let targets = synth::trend_path(s.comfort_points, s.trend_noise_sd, cfg.seed.wrapping_add(1));
    let picked = synth::nearest_images(&pop.latent, &targets);
    let vata: Vec<f64> = picked.iter().map(|(_, v)| *v).collect();
    let mut points =
        synth::generate_comfort_path(&vata, s.comfort_points, &s.comfort, s.comfort_noise_sd, cfg.seed.wrapping_add(2))?;
    for (p, (id, _)) in points.iter_mut().zip(&picked) {
        p.image_id = Some(id.clone());
    }
    save_comfort(&points, wd.join(COMFORT))?;

    save_json(
        &LatentFile {
            truth: pop.truth,
            survey_ids: sample.ids,
            latent: pop.latent,
        },
        wd.join(LATENT),
    )?;
    log::info!(
        "synth: {} images, {} comparisons, {} comfort points",
        table.records.len(),
        comparisons.len(),
        points.len()
    );
    Ok(())
}

pub fn cluster(cfg: &Config, wd: &Path) -> Result<()> {
    let mut table = load_feature_table(wd.join(FEATURES))?;
    let model = cluster_points(&table, cfg)?;
    for (r, l) in table.records.iter_mut().zip(&model.labels) {
        r.cluster_label = Some(*l);
    }
    save_feature_table(&table, wd.join(FEATURES))?;
    let report = json!({
        "features": "segmentation",
        "k": model.k,
        "sizes": model.sizes(),
        "inertia": model.inertia,
        "converged": model.converged,
        "iterations": model.iterations,
        "restart_inertia": model.restart_inertia,
        "repairs": model.repairs,
        "centroids": model.centroids,
    });
    save_json(&report, wd.join(CLUSTER_REPORT))
}

pub fn sample(cfg: &Config, wd: &Path) -> Result<()> {
    let table = load_feature_table(wd.join(FEATURES))?;
    let labels = labels_of(&table)?;
    let ids = table.ids();
    let sample = sampling::stratified_sample(&ids, &labels, cfg.sample.n_per_class, cfg.seed)?;
    let manifest = ImageManifest::from_ids(&sample.ids, &cfg.sample.url_prefix);
    manifest.validate()?;
    save_json(&manifest, wd.join(MANIFEST))?;

    let rows: Vec<Vec<f64>> = table.features.iter().map(|f| f.interpretable().to_vec()).collect();
    let stratified = sampling::coverage_report(&ids, &rows, &sample.ids, cfg.sample.grid_bins)?;
    let baseline_ids = sampling::random_sample(&ids, sample.ids.len(), cfg.seed)?;
    let baseline = sampling::coverage_report(&ids, &rows, &baseline_ids, cfg.sample.grid_bins)?;
    save_json(
        &json!({ "stratified": stratified, "random_baseline": baseline }),
        wd.join(COVERAGE),
    )?;
    save_json(&sample, wd.join(SAMPLE))
}

pub fn score(cfg: &Config, wd: &Path) -> Result<()> {
    let manifest: ImageManifest = load_json(wd.join(MANIFEST))?;
    let ids = manifest.ids();
    let comparisons = load_comparisons(wd.join(COMPARISONS))?;
    let pos: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut wide: Vec<IndicatorScores> = ids.iter().map(|id| zeroed(id)).collect();
    let mut diagnostics: Vec<IndicatorDiagnostics> = Vec::new();
    let mut unscored = Vec::new();
    fs::create_dir_all(wd.join(SCORES_DIR))?;
    for ind in Indicator::all() {
        // a live survey log may not cover every indicator yet
        if !comparisons.iter().any(|c| c.indicator == ind) {
            unscored.push(ind.name());
            continue;
        }
        let s = trueskill::score_indicator(&comparisons, ind, &ids, &cfg.score)?;
        fs::write(wd.join(SCORES_DIR).join(format!("{}.csv", ind.name())), s.to_csv()?)?;
        for (id, v) in s.ranking.image_ids.iter().zip(&s.scores) {
            wide[pos[id.as_str()]].set(ind, *v);
        }
        diagnostics.push(s.diagnostics);
    }
    if diagnostics.is_empty() {
        return Err(Error::EmptySample);
    }
    if unscored.is_empty() {
        save_scores(&wide, wd.join(SCORES))?;
    } else {
        log::warn!("score: no comparisons for {unscored:?}; {SCORES} not written");
    }
    save_json(
        &json!({ "indicators": diagnostics, "unscored": unscored }),
        wd.join(SCORE_DIAGNOSTICS),
    )?;

    let sample_path = wd.join(SAMPLE);
    if sample_path.exists() && !unscored.contains(&Indicator::Vata.name()) {
        let sample: StratifiedSample = load_json(sample_path)?;
        let vata: HashMap<&str, f64> = wide.iter().map(|s| (s.image_id.as_str(), s.vata)).collect();
        let mut sizes: Vec<usize> = cfg.sample.convergence_sizes.iter().copied().filter(|&n| n > 0 && n < ids.len()).collect();
        sizes.sort_unstable();
        sizes.dedup();
        sizes.push(ids.len());
        let by_size = sizes
            .iter()
            .map(|&n| {
                let v = sample
                    .prefix(n)
                    .iter()
                    .map(|id| vata.get(id.as_str()).copied().ok_or_else(|| Error::UnknownImage(id.clone())))
                    .collect::<Result<Vec<f64>>>()?;
                Ok((n, v))
            })
            .collect::<Result<Vec<_>>>()?;
        save_json(&sampling::convergence_report(&by_size)?, wd.join(CONVERGENCE))?;
    }
    Ok(())
}

fn fit_summary(f: &enrm::ModelFit) -> Value {
    json!({
        "alpha": f.cv.alpha,
        "cv_r2": f.cv.cv_r2,
        "significant_coefficients": f.significant_coefficients,
        "mean_vif": f.mean_vif,
        "metrics": f.report,
    })
}

pub fn fit_enrm(cfg: &Config, wd: &Path) -> Result<()> {
    let table = load_feature_table(wd.join(FEATURES))?;
    let scores = load_scores(wd.join(SCORES))?;
    let ids: Vec<&str> = scores.iter().map(|s| s.image_id.as_str()).collect();
    let if_rows = if_rows_for(&table, &ids)?;
    let names = interpretable_names();

    let suite = enrm::fit_suite(&if_rows, names, &scores, &cfg.enrm)?;
    let held_out = enrm::held_out_evaluation(&if_rows, &scores, &cfg.enrm)?;
    save_json(&suite, wd.join(ENRM_MODELS))?;
    save_json(&suite.two_stage_model(), wd.join(ENRM_TWO_STAGE))?;

    let stage1: BTreeMap<&str, Value> = suite.stage1.iter().map(|f| (f.name.as_str(), fit_summary(f))).collect();
    let metrics = json!({
        "convention": enrm::CONVENTION,
        "full_sample": {
            "if_only": fit_summary(&suite.if_only),
            "vpi_only": fit_summary(&suite.vpi_only),
            "two_stage": fit_summary(&suite.two_stage),
            "stage1": stage1,
        },
        "held_out": held_out,
    });
    save_json(&metrics, wd.join(ENRM_METRICS))?;

    let weights = [&suite.if_only, &suite.vpi_only, &suite.two_stage]
        .iter()
        .map(|f| enrm::weight_report(&f.name, &f.model))
        .collect::<Result<Vec<_>>>()?;
    save_json(&weights, wd.join(ENRM_WEIGHTS))?;
    save_json(
        &enrm::correlation_ranking(&scores, names, &if_rows)?,
        wd.join(ENRM_CORRELATIONS),
    )
}

/// Metrics with the VATA head fed the observed VPIs.
fn teacher_forced(params: &MtnnlParams, ds: &Dataset, idx: &[usize]) -> Result<RegressionReport> {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| ds.x[i].as_slice()).collect();
    let vpi: Vec<[f64; VPI_COUNT]> = idx.iter().map(|&i| ds.vpi[i]).collect();
    let preds = params.forward_batch(&rows, Some(&vpi))?;
    let y: Vec<f64> = idx.iter().map(|&i| ds.vata[i]).collect();
    let yhat: Vec<f64> = preds.iter().map(|p| p.vata).collect();
    match stats::regression_metrics(&y, &yhat, params.config.input_dim) {
        Err(Error::DegenerateDof { .. }) => stats::regression_metrics(&y, &yhat, 0),
        r => r,
    }
}

#[derive(Serialize)]
struct MtnnlEval {
    best_epoch: usize,
    best_val_loss: f64,
    train_size: usize,
    val_size: usize,
    test_size: usize,
    test: Evaluation,
    test_teacher_forced_vata: RegressionReport,
    train: Evaluation,
    folds: Vec<FoldResult>,
}

#[derive(Serialize)]
struct GradientReport {
    hidden_f: Vec<usize>,
    hidden_g: Vec<usize>,
    activation: Activation,
    rows: usize,
    check: GradientCheck,
}

pub fn train_mtnnl(cfg: &Config, wd: &Path) -> Result<()> {
    let table = load_feature_table(wd.join(FEATURES))?;
    let scores = load_scores(wd.join(SCORES))?;
    let m = &cfg.mtnnl;
    let ds = Dataset::join(&table.features, &scores, m.use_embedding)?;
    if ds.is_empty() {
        return Err(Error::EmptySample);
    }
    let label_of: HashMap<&str, usize> =
        table.records.iter().map(|r| r.image_id.as_str()).zip(labels_of(&table)?).collect();
    let labels: Vec<usize> = ds.ids.iter().map(|id| label_of[id.as_str()]).collect();
    let plan = mtnnl::split(&ds.ids, &labels, m.ratios, m.folds.max(1), cfg.seed)?;
    let train_idx = ds.indices_of(&plan.train)?;
    let val_idx = ds.indices_of(&plan.val)?;
    let test_idx = ds.indices_of(&plan.test)?;

    let mut net = m.network.clone();
    net.input_dim = ds.x[0].len();
    let out = mtnnl::train(&net, &ds, &train_idx, &val_idx)?;

    let folds = if m.folds >= 2 {
        mtnnl::kfold(&net, &ds, &plan, m.folds)?
    } else {
        Vec::new()
    };
    let eval = MtnnlEval {
        best_epoch: out.best_epoch,
        best_val_loss: out.best_val_loss,
        train_size: train_idx.len(),
        val_size: val_idx.len(),
        test_size: test_idx.len(),
        test: mtnnl::evaluate(&out.params, &ds, &test_idx)?,
        test_teacher_forced_vata: teacher_forced(&out.params, &ds, &test_idx)?,
        train: mtnnl::evaluate(&out.params, &ds, &train_idx)?,
        folds,
    };
    save_json(&eval, wd.join(MTNNL_EVAL))?;

    let mut history = String::from("epoch,train_loss,val_loss,train_l_f,train_l_g\n");
    for h in &out.history {
        history.push_str(&format!(
            "{},{},{},{},{}\n",
            h.epoch, h.train_loss, h.val_loss, h.train_l_f, h.train_l_g
        ));
    }
    fs::write(wd.join(MTNNL_HISTORY), history)?;

    // same family as the trained network, narrowed so every parameter is checked
    let mut small = net.clone();
    small.hidden_f = net.hidden_f.iter().map(|w| (*w).min(16)).collect();
    small.hidden_g = net.hidden_g.iter().map(|w| (*w).min(16)).collect();
    let rows = train_idx.len().min(8);
    let check = mtnnl::gradient_check(&small, &ds, &train_idx[..rows])?;
    save_json(
        &GradientReport {
            hidden_f: small.hidden_f,
            hidden_g: small.hidden_g,
            activation: small.activation,
            rows,
            check,
        },
        wd.join(MTNNL_GRADIENT_CHECK),
    )?;

    save_json(
        &ModelBundle {
            use_embedding: m.use_embedding,
            seed: cfg.seed,
            params: out.params,
        },
        wd.join(MTNNL_PARAMS),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModelKind {
    Mtnnl,
    Enrm,
}

pub fn predict(wd: &Path, features: Option<PathBuf>, out: Option<PathBuf>, model: ModelKind) -> Result<()> {
    let table = load_feature_table(features.unwrap_or_else(|| wd.join(FEATURES)))?;
    let raw: Vec<f64> = match model {
        ModelKind::Mtnnl => {
            let bundle: ModelBundle = load_json(wd.join(MTNNL_PARAMS))?;
            let rows = table
                .features
                .iter()
                .map(|f| {
                    if bundle.use_embedding {
                        f.d1()
                    } else {
                        Ok(f.interpretable().to_vec())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            bundle.params.forward_batch(&refs, None)?.iter().map(|p| p.vata).collect()
        }
        ModelKind::Enrm => {
            let model: TwoStageModel = load_json(wd.join(ENRM_TWO_STAGE))?;
            table.features.iter().map(|f| model.predict_vata(f.interpretable(), None)).collect()
        }
    };
    let mut w = csv::Writer::from_path(out.unwrap_or_else(|| wd.join(PREDICTIONS))).map_err(csv_err)?;
    w.write_record(["image_id", "vata"]).map_err(csv_err)?;
    let mut clamped = 0;
    for (f, v) in table.features.iter().zip(&raw) {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite prediction for {}", f.image_id)));
        }
        let c = v.clamp(0.0, 5.0);
        if c != *v {
            clamped += 1;
        }
        w.write_record([f.image_id.clone(), format!("{c}")]).map_err(csv_err)?;
    }
    w.flush()?;
    if clamped > 0 {
        log::info!("predict: {clamped} predictions clamped to [0, 5]");
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Schema(format!("csv: {e}"))
}

fn load_predictions(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let (Some(id), Some(v)) = (rec.get(0), rec.get(1)) else {
            return Err(Error::Schema(format!("{}: row {} needs image_id,vata", path.display(), i + 2)));
        };
        let v: f64 = v
            .parse()
            .map_err(|_| Error::Schema(format!("{}: row {}: bad vata {v:?}", path.display(), i + 2)))?;
        out.push((id.to_string(), v));
    }
    Ok(out)
}

pub fn validate(cfg: &Config, wd: &Path) -> Result<()> {
    let points = load_comfort(wd.join(COMFORT))?;
    let preds: HashMap<String, f64> = load_predictions(&wd.join(PREDICTIONS))?.into_iter().collect();
    let table = load_feature_table(wd.join(FEATURES))?;
    let ids: Vec<&str> = points
        .iter()
        .map(|p| {
            p.image_id
                .as_deref()
                .ok_or_else(|| Error::Schema(format!("comfort point {} has no image_id", p.point_id)))
        })
        .collect::<Result<_>>()?;
    let vata: Vec<f64> = ids
        .iter()
        .map(|id| preds.get(*id).copied().ok_or_else(|| Error::UnknownImage(id.to_string())))
        .collect::<Result<_>>()?;
    let comfort: Vec<f64> = points.iter().map(|p| p.comfort).collect();
    let if_rows = if_rows_for(&table, &ids)?;

    let ema = validation::fit_vata_comfort(&vata, &comfort, &cfg.validate.alphas)?;
    let sets = validation::standard_sets(&points, &vata, interpretable_names(), &if_rows)?;
    let multivariate = validation::fit_multivariate(&sets, &comfort)?;
    save_json(
        &json!({
            "n": points.len(),
            "ema": ema,
            "multivariate": multivariate,
            "multivariate_inputs": "raw series, every column z-scored",
        }),
        wd.join(VALIDATION),
    )
}

pub fn map(cfg: &Config, wd: &Path) -> Result<()> {
    cfg.map.thresholds.validate()?;
    let preds = load_predictions(&wd.join(PREDICTIONS))?;
    let table = load_feature_table(wd.join(FEATURES))?;
    let grid = HexGrid::centered_on(&table.records, cfg.map.edge_m)?;
    let aggs = geomap::aggregate(&preds, &table.records, &grid, &cfg.map.thresholds)?;
    save_json(&geomap::export_geojson(&aggs, &grid)?, wd.join(MAP))
}

pub fn report(cfg: &Config, wd: &Path) -> Result<()> {
    let mut reports = serde_json::Map::new();
    let mut missing = Vec::new();
    for (name, file) in REPORTS {
        let path = wd.join(file);
        if path.exists() {
            let v: Value = load_json(&path)?;
            reports.insert(name.to_string(), v);
        } else {
            missing.push(name);
        }
    }
    save_json(
        &json!({
            "schema_version": REPORT_SCHEMA,
            "seed": cfg.seed,
            "reports": reports,
            "missing": missing,
        }),
        wd.join(SUMMARY),
    )
}

pub fn serve(cfg: &Config, wd: &Path, port: Option<u16>, log_path: Option<PathBuf>) -> Result<()> {
    let scfg = vata_service::ServiceConfig {
        port: port.unwrap_or(cfg.serve.port),
        manifest_path: wd.join(MANIFEST),
        log_path: log_path.unwrap_or_else(|| wd.join(SURVEY_LOG)),
        seed: cfg.seed,
        scoring: cfg.score.clone(),
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(vata_service::serve(&scfg))
}
