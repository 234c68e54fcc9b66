//! Two-stage multi-task network.
//!
//! `f` maps the D1 features to the 19 VPIs; `g` maps the features joined
//! with VPIs to VATA. Training minimizes `L = α·L_f + (1 − α)·L_g` with `g`
//! fed the observed VPIs (teacher forcing); inference feeds `g` the output of
//! `f`. A single-task variant (no `f`, `g` on features alone) serves as the
//! matched-capacity baseline.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureVector, IndicatorScores};
use crate::error::{Error, Result};
use crate::indicator::{Vpi, VPI_COUNT};
use crate::linalg::mean_std;
use crate::stats::{self, RegressionReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and activation `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    SgdMomentum,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden_f: Vec<usize>,
    pub hidden_g: Vec<usize>,
    pub activation: Activation,
    pub loss_alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub momentum: f64,
    /// Std of Gaussian noise added to standardized inputs while training.
    pub feature_jitter: f64,
    /// `false` trains the single-task baseline: `g` on features alone.
    pub multi_task: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_dim: 0,
            hidden_f: vec![256, 128],
            hidden_g: vec![128, 64],
            activation: Activation::Relu,
            loss_alpha: 0.5,
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            optimizer: Optimizer::Adam,
            momentum: 0.9,
            feature_jitter: 0.0,
            multi_task: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be at least 1"));
        }
        if self.hidden_f.contains(&0) || self.hidden_g.contains(&0) {
            return Err(Error::config("hidden widths must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.loss_alpha) {
            return Err(Error::config("loss_alpha must lie in [0, 1]"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.feature_jitter >= 0.0) {
            return Err(Error::config("feature_jitter must be >= 0"));
        }
        Ok(())
    }

    fn g_input_dim(&self) -> usize {
        self.input_dim + if self.multi_task { VPI_COUNT } else { 0 }
    }

    pub fn parameter_count(&self) -> usize {
        let count = |dims: &[usize]| dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>();
        let g = count(&[&[self.g_input_dim()][..], &self.hidden_g, &[1]].concat());
        if self.multi_task {
            g + count(&[&[self.input_dim][..], &self.hidden_f, &[VPI_COUNT]].concat())
        } else {
            g
        }
    }

    /// Single-task baseline with two hidden layers `[h, h/2]` whose total
    /// parameter count is closest to this two-task network's.
    pub fn matched_single_task(&self) -> NetworkConfig {
        let target = self.parameter_count();
        let mut best = (usize::MAX, 1);
        for h in 2..=4096 {
            let cfg = NetworkConfig {
                hidden_g: vec![h, (h / 2).max(1)],
                multi_task: false,
                ..self.clone()
            };
            let diff = cfg.parameter_count().abs_diff(target);
            if diff < best.0 {
                best = (diff, h);
            }
        }
        NetworkConfig {
            hidden_g: vec![best.1, (best.1 / 2).max(1)],
            hidden_f: Vec::new(),
            multi_task: false,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "LayerData", try_from = "LayerData")]
pub struct Layer {
    /// outputs × inputs
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerData {
    inputs: usize,
    outputs: usize,
    /// Row-major, one row per output unit.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl From<Layer> for LayerData {
    fn from(l: Layer) -> Self {
        LayerData {
            inputs: l.w.ncols(),
            outputs: l.w.nrows(),
            weights: l.w.transpose().as_slice().to_vec(),
            bias: l.b.as_slice().to_vec(),
        }
    }
}

impl TryFrom<LayerData> for Layer {
    type Error = String;

    fn try_from(d: LayerData) -> std::result::Result<Self, String> {
        if d.weights.len() != d.inputs * d.outputs || d.bias.len() != d.outputs {
            return Err(format!(
                "layer {}x{} has {} weights and {} biases",
                d.outputs,
                d.inputs,
                d.weights.len(),
                d.bias.len()
            ));
        }
        Ok(Layer {
            w: DMatrix::from_row_slice(d.outputs, d.inputs, &d.weights),
            b: DVector::from_vec(d.bias),
        })
    }
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer {
            w: DMatrix::zeros(self.w.nrows(), self.w.ncols()),
            b: DVector::zeros(self.b.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

struct Cache {
    /// Input to each layer.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<DMatrix<f64>>,
}

impl Mlp {
    fn init(dims: &[usize], act: Activation, rng: &mut ChaCha8Rng) -> Mlp {
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = match act {
                    Activation::Relu => (2.0 / fan_in as f64).sqrt(),
                    Activation::Tanh => (1.0 / fan_in as f64).sqrt(),
                };
                Layer {
                    w: DMatrix::from_fn(fan_out, fan_in, |_, _| scale * rng.sample::<f64, _>(StandardNormal)),
                    b: DVector::zeros(fan_out),
                }
            })
            .collect();
        Mlp { layers }
    }

    fn forward(&self, x: &DMatrix<f64>, act: Activation) -> (DMatrix<f64>, Cache) {
        let mut cache = Cache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &a * layer.w.transpose();
            for (j, mut col) in z.column_iter_mut().enumerate() {
                col.add_scalar_mut(layer.b[j]);
            }
            let out = if l == last { z.clone() } else { z.map(|v| act.apply(v)) };
            cache.inputs.push(std::mem::replace(&mut a, out));
            cache.pre.push(z);
        }
        (a, cache)
    }

    /// Gradients of every layer given dLoss/dOutput.
    fn backward(&self, cache: &Cache, d_out: DMatrix<f64>, act: Activation) -> Vec<Layer> {
        let mut grads = vec![None; self.layers.len()];
        let mut dz = d_out;
        for l in (0..self.layers.len()).rev() {
            let input = &cache.inputs[l];
            let gw = dz.transpose() * input;
            let gb = DVector::from_iterator(dz.ncols(), dz.column_iter().map(|c| c.sum()));
            if l > 0 {
                let da = &dz * &self.layers[l].w;
                let z_prev = &cache.pre[l - 1];
                dz = DMatrix::from_fn(da.nrows(), da.ncols(), |i, j| {
                    da[(i, j)] * act.derivative(z_prev[(i, j)], input[(i, j)])
                });
            }
            grads[l] = Some(Layer { w: gw, b: gb });
        }
        grads.into_iter().map(Option::unwrap).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtnnlParams {
    pub config: NetworkConfig,
    pub input_means: Vec<f64>,
    pub input_scales: Vec<f64>,
    pub vpi_means: Vec<f64>,
    pub vpi_scales: Vec<f64>,
    pub f: Option<Mlp>,
    pub g: Mlp,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Empty for the single-task network.
    pub vpi: Vec<f64>,
    pub vata: f64,
}

impl MtnnlParams {
    /// Fresh parameters; standardization is identity until fitted.
    pub fn init(cfg: &NetworkConfig) -> Result<MtnnlParams> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let f = cfg.multi_task.then(|| {
            let dims = [&[cfg.input_dim][..], &cfg.hidden_f, &[VPI_COUNT]].concat();
            Mlp::init(&dims, cfg.activation, &mut rng)
        });
        let dims = [&[cfg.g_input_dim()][..], &cfg.hidden_g, &[1]].concat();
        let g = Mlp::init(&dims, cfg.activation, &mut rng);
        Ok(MtnnlParams {
            config: cfg.clone(),
            input_means: vec![0.0; cfg.input_dim],
            input_scales: vec![1.0; cfg.input_dim],
            vpi_means: vec![0.0; VPI_COUNT],
            vpi_scales: vec![1.0; VPI_COUNT],
            f,
            g,
            best_epoch: 0,
        })
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.f.iter().flat_map(|m| &m.layers).chain(&self.g.layers)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.f.iter_mut().flat_map(|m| &mut m.layers).chain(&mut self.g.layers)
    }

    fn standardize(&self, rows: &[&[f64]]) -> Result<DMatrix<f64>> {
        let d = self.config.input_dim;
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::Shape {
                expected: d,
                got: bad.len(),
            });
        }
        Ok(DMatrix::from_fn(rows.len(), d, |i, j| {
            (rows[i][j] - self.input_means[j]) / self.input_scales[j]
        }))
    }

    fn g_input(&self, xs: &DMatrix<f64>, vpi: Option<&DMatrix<f64>>) -> DMatrix<f64> {
        match vpi {
            Some(v) if self.config.multi_task => {
                let d = xs.ncols();
                DMatrix::from_fn(xs.nrows(), d + VPI_COUNT, |i, j| {
                    if j < d {
                        xs[(i, j)]
                    } else {
                        let k = j - d;
                        (v[(i, k)] - self.vpi_means[k]) / self.vpi_scales[k]
                    }
                })
            }
            _ => xs.clone(),
        }
    }

    /// Batch forward pass. With `vpi_in` the VATA head is teacher-forced;
    /// otherwise it consumes the predicted VPIs.
    pub fn forward_batch(&self, rows: &[&[f64]], vpi_in: Option<&[[f64; VPI_COUNT]]>) -> Result<Vec<Prediction>> {
        let xs = self.standardize(rows)?;
        let act = self.config.activation;
        let vpi_pred = self.f.as_ref().map(|f| f.forward(&xs, act).0);
        let forced = vpi_in.map(|v| DMatrix::from_fn(v.len(), VPI_COUNT, |i, j| v[i][j]));
        let g_vpi = forced.as_ref().or(vpi_pred.as_ref());
        let y = self.g.forward(&self.g_input(&xs, g_vpi), act).0;
        Ok((0..rows.len())
            .map(|i| Prediction {
                vpi: vpi_pred
                    .as_ref()
                    .map(|v| v.row(i).iter().copied().collect())
                    .unwrap_or_default(),
                vata: y[(i, 0)],
            })
            .collect())
    }

    /// Inference-mode prediction for one feature row.
    pub fn forward(&self, row: &[f64]) -> Result<Prediction> {
        Ok(self.forward_batch(&[row], None)?.remove(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub l_f: f64,
    pub l_g: f64,
}

/// Per-sample loss: `L_f` is the mean squared error over the VPI outputs,
/// `L_g` the squared VATA error.
pub fn loss(vpi_pred: &[f64], vpi_true: &[f64], vata_pred: f64, vata_true: f64, loss_alpha: f64) -> LossParts {
    let l_f = if vpi_pred.is_empty() {
        0.0
    } else {
        vpi_pred
            .iter()
            .zip(vpi_true)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / vpi_pred.len() as f64
    };
    let l_g = (vata_pred - vata_true).powi(2);
    LossParts {
        total: loss_alpha * l_f + (1.0 - loss_alpha) * l_g,
        l_f,
        l_g,
    }
}

/// Aligned training data: D1 rows, observed VPIs and VATA.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub vpi: Vec<[f64; VPI_COUNT]>,
    pub vata: Vec<f64>,
}

impl Dataset {
    /// Joins scores to feature vectors by image id. `use_embedding` selects
    /// D1 (interpretable ++ embedding) over the interpretable block alone.
    pub fn join(features: &[FeatureVector], scores: &[IndicatorScores], use_embedding: bool) -> Result<Dataset> {
        let by_id: HashMap<&str, &FeatureVector> = features.iter().map(|f| (f.image_id.as_str(), f)).collect();
        let mut ds = Dataset {
            ids: Vec::with_capacity(scores.len()),
            x: Vec::with_capacity(scores.len()),
            vpi: Vec::with_capacity(scores.len()),
            vata: Vec::with_capacity(scores.len()),
        };
        for s in scores {
            let f = by_id
                .get(s.image_id.as_str())
                .ok_or_else(|| Error::UnknownImage(s.image_id.clone()))?;
            ds.x.push(if use_embedding {
                f.d1()?
            } else {
                f.interpretable().to_vec()
            });
            ds.ids.push(s.image_id.clone());
            ds.vpi.push(s.vpi);
            ds.vata.push(s.vata);
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn indices_of(&self, ids: &[String]) -> Result<Vec<usize>> {
        let pos: HashMap<&str, usize> = self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        ids.iter()
            .map(|id| {
                pos.get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::UnknownImage(id.clone()))
            })
            .collect()
    }
}

fn batch_loss_and_grads(
    params: &MtnnlParams,
    xs: &DMatrix<f64>,
    vpi: &DMatrix<f64>,
    vata: &[f64],
    want_grads: bool,
) -> (LossParts, Option<Vec<Layer>>) {
    let cfg = &params.config;
    let act = cfg.activation;
    let b = xs.nrows() as f64;
    let alpha = if cfg.multi_task { cfg.loss_alpha } else { 0.0 };

    let mut grads = Vec::new();
    let mut l_f = 0.0;
    if let Some(f) = &params.f {
        let (out, cache) = f.forward(xs, act);
        let diff = &out - vpi;
        l_f = diff.iter().map(|d| d * d).sum::<f64>() / (b * VPI_COUNT as f64);
        if want_grads {
            let d_out = diff * (2.0 * alpha / (b * VPI_COUNT as f64));
            grads.extend(f.backward(&cache, d_out, act));
        }
    }
    let gin = params.g_input(xs, Some(vpi));
    let (out, cache) = params.g.forward(&gin, act);
    let diff = DMatrix::from_fn(out.nrows(), 1, |i, _| out[(i, 0)] - vata[i]);
    let l_g = diff.iter().map(|d| d * d).sum::<f64>() / b;
    if want_grads {
        let d_out = diff * (2.0 * (1.0 - alpha) / b);
        grads.extend(params.g.backward(&cache, d_out, act));
    }
    let parts = LossParts {
        total: alpha * l_f + (1.0 - alpha) * l_g,
        l_f,
        l_g,
    };
    (parts, want_grads.then_some(grads))
}

fn gather<'a>(ds: &'a Dataset, idx: &[usize]) -> (Vec<&'a [f64]>, DMatrix<f64>, Vec<f64>) {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| ds.x[i].as_slice()).collect();
    let vpi = DMatrix::from_fn(idx.len(), VPI_COUNT, |r, k| ds.vpi[idx[r]][k]);
    let vata = idx.iter().map(|&i| ds.vata[i]).collect();
    (rows, vpi, vata)
}

/// Teacher-forced Eq.-2 loss over a set of rows.
pub fn set_loss(params: &MtnnlParams, ds: &Dataset, idx: &[usize]) -> Result<LossParts> {
    if idx.is_empty() {
        return Err(Error::EmptySample);
    }
    let (rows, vpi, vata) = gather(ds, idx);
    let xs = params.standardize(&rows)?;
    Ok(batch_loss_and_grads(params, &xs, &vpi, &vata, false).0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_l_f: f64,
    pub train_l_g: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MtnnlParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

struct OptState {
    m: Vec<Layer>,
    v: Vec<Layer>,
    t: i32,
}

fn step(params: &mut MtnnlParams, grads: &[Layer], state: &mut OptState) {
    let cfg = params.config.clone();
    let lr = cfg.learning_rate;
    state.t += 1;
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let c1 = 1.0 - b1.powi(state.t);
    let c2 = 1.0 - b2.powi(state.t);
    let layers = params.layers_mut();
    for (((p, g), m), v) in layers.zip(grads).zip(&mut state.m).zip(&mut state.v) {
        match cfg.optimizer {
            Optimizer::Adam => {
                let upd = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                };
                upd(p.w.as_mut_slice(), g.w.as_slice(), m.w.as_mut_slice(), v.w.as_mut_slice());
                upd(p.b.as_mut_slice(), g.b.as_slice(), m.b.as_mut_slice(), v.b.as_mut_slice());
            }
            Optimizer::SgdMomentum => {
                let upd = |p: &mut [f64], g: &[f64], m: &mut [f64]| {
                    for i in 0..p.len() {
                        m[i] = cfg.momentum * m[i] + g[i];
                        p[i] -= lr * m[i];
                    }
                };
                upd(p.w.as_mut_slice(), g.w.as_slice(), m.w.as_mut_slice());
                upd(p.b.as_mut_slice(), g.b.as_slice(), m.b.as_mut_slice());
            }
        }
    }
}

fn column_stats(rows: impl Iterator<Item = Vec<f64>>, width: usize) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<Vec<f64>> = rows.collect();
    (0..width)
        .map(|j| {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            let (m, s) = mean_std(&col);
            (m, if s > 0.0 { s } else { 1.0 })
        })
        .unzip()
}

/// Mini-batch training on the Eq.-2 loss; returns the parameters of the
/// epoch with the lowest validation loss (training loss when `val_idx` is
/// empty). Epoch 0 is the initialization.
pub fn train(cfg: &NetworkConfig, ds: &Dataset, train_idx: &[usize], val_idx: &[usize]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::EmptySample);
    }
    if let Some(bad) = ds.x.iter().find(|r| r.len() != cfg.input_dim) {
        return Err(Error::Shape {
            expected: cfg.input_dim,
            got: bad.len(),
        });
    }
    if ds.x.iter().flatten().chain(&ds.vata).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite training input".into()));
    }
    let mut params = MtnnlParams::init(cfg)?;
    let (im, is) = column_stats(train_idx.iter().map(|&i| ds.x[i].clone()), cfg.input_dim);
    let (vm, vs) = column_stats(train_idx.iter().map(|&i| ds.vpi[i].to_vec()), VPI_COUNT);
    params.input_means = im;
    params.input_scales = is;
    // output biases start at the training means
    if let Some(f) = params.f.as_mut() {
        f.layers.last_mut().unwrap().b = DVector::from_column_slice(&vm);
    }
    let vata_mean = train_idx.iter().map(|&i| ds.vata[i]).sum::<f64>() / train_idx.len() as f64;
    params.g.layers.last_mut().unwrap().b[0] = vata_mean;
    params.vpi_means = vm;
    params.vpi_scales = vs;

    let mut state = OptState {
        m: params.layers().map(Layer::zeros_like).collect(),
        v: params.layers().map(Layer::zeros_like).collect(),
        t: 0,
    };
    let checkpoint_set = if val_idx.is_empty() { train_idx } else { val_idx };
    let record = |params: &MtnnlParams, epoch: usize| -> Result<EpochRecord> {
        let tr = set_loss(params, ds, train_idx)?;
        let val = set_loss(params, ds, checkpoint_set)?.total;
        if !(tr.total.is_finite() && val.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        Ok(EpochRecord {
            epoch,
            train_loss: tr.total,
            val_loss: val,
            train_l_f: tr.l_f,
            train_l_g: tr.l_g,
        })
    };

    let mut history = vec![record(&params, 0)?];
    let mut best = (0, history[0].val_loss, params.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order = train_idx.to_vec();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (rows, vpi, vata) = gather(ds, chunk);
            let mut xs = params.standardize(&rows)?;
            if cfg.feature_jitter > 0.0 {
                xs.iter_mut()
                    .for_each(|v| *v += cfg.feature_jitter * rng.sample::<f64, _>(StandardNormal));
            }
            let (parts, grads) = batch_loss_and_grads(&params, &xs, &vpi, &vata, true);
            if !parts.total.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            step(&mut params, &grads.unwrap(), &mut state);
        }
        let rec = record(&params, epoch)?;
        if rec.val_loss < best.1 {
            best = (epoch, rec.val_loss, params.clone());
        }
        history.push(rec);
    }
    let (best_epoch, best_val_loss, mut best_params) = best;
    best_params.best_epoch = best_epoch;
    Ok(TrainOutcome {
        params: best_params,
        history,
        best_epoch,
        best_val_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Fold index per id (category-stratified k-fold over all ids).
    pub folds: BTreeMap<String, usize>,
    pub strata: BTreeMap<String, usize>,
}

pub const MIN_STRATUM: usize = 5;

/// Stratified train/val/test split plus a stratified `k`-fold assignment.
pub fn split(ids: &[String], labels: &[usize], ratios: (f64, f64, f64), k: usize, seed: u64) -> Result<SplitPlan> {
    if ids.len() != labels.len() {
        return Err(Error::Shape {
            expected: ids.len(),
            got: labels.len(),
        });
    }
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(*r >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::config("split ratios must be non-negative and sum to 1"));
    }
    if k == 0 {
        return Err(Error::config("k-fold needs k >= 1"));
    }
    let mut strata: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
    for (id, &l) in ids.iter().zip(labels) {
        strata.entry(l).or_default().push(id);
    }
    if let Some((&s, m)) = strata.iter().find(|(_, m)| m.len() < MIN_STRATUM) {
        return Err(Error::StratumTooSmall {
            stratum: s,
            size: m.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = SplitPlan {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        folds: BTreeMap::new(),
        strata: ids.iter().cloned().zip(labels.iter().copied()).collect(),
    };
    let mut offset = 0;
    for (_, mut members) in strata {
        members.shuffle(&mut rng);
        let n = members.len();
        let n_train = ((a * n as f64).round() as usize).min(n);
        let n_val = ((b * n as f64).round() as usize).min(n - n_train);
        let n_val = if c == 0.0 { n - n_train } else { n_val };
        for (pos, id) in members.iter().enumerate() {
            let dest = if pos < n_train {
                &mut plan.train
            } else if pos < n_train + n_val {
                &mut plan.val
            } else {
                &mut plan.test
            };
            dest.push((*id).clone());
            plan.folds.insert((*id).clone(), (pos + offset) % k);
        }
        offset += n;
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n: usize,
    pub mode: String,
    pub k_convention: String,
    pub vata: RegressionReport,
    pub vpi: BTreeMap<String, RegressionReport>,
}

fn neural_metrics(y: &[f64], pred: &[f64], k: usize) -> Result<(RegressionReport, String)> {
    match stats::regression_metrics(y, pred, k) {
        Ok(r) => Ok((r, format!("neural: adjusted R2 uses k = input feature count ({k})"))),
        Err(Error::DegenerateDof { .. }) => Ok((
            stats::regression_metrics(y, pred, 0)?,
            format!("neural: n too small for k = {k}; adjusted R2 uses k = 0"),
        )),
        Err(e) => Err(e),
    }
}

/// Inference-mode metrics (VATA head consumes predicted VPIs).
pub fn evaluate(params: &MtnnlParams, ds: &Dataset, idx: &[usize]) -> Result<Evaluation> {
    if idx.len() < 2 {
        return Err(Error::InsufficientItems(idx.len()));
    }
    let rows: Vec<&[f64]> = idx.iter().map(|&i| ds.x[i].as_slice()).collect();
    let preds = params.forward_batch(&rows, None)?;
    let y: Vec<f64> = idx.iter().map(|&i| ds.vata[i]).collect();
    let yhat: Vec<f64> = preds.iter().map(|p| p.vata).collect();
    let k = params.config.input_dim;
    let (vata, k_convention) = neural_metrics(&y, &yhat, k)?;
    let mut vpi = BTreeMap::new();
    if params.f.is_some() {
        for (j, v) in Vpi::ALL.iter().enumerate() {
            let t: Vec<f64> = idx.iter().map(|&i| ds.vpi[i][j]).collect();
            let p: Vec<f64> = preds.iter().map(|p| p.vpi[j]).collect();
            vpi.insert(v.name().to_string(), neural_metrics(&t, &p, k)?.0);
        }
    }
    Ok(Evaluation {
        n: idx.len(),
        mode: "inference".into(),
        k_convention,
        vata,
        vpi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub best_epoch: usize,
    pub val: Evaluation,
}

/// Trains one model per fold (in parallel) and evaluates on the held-out fold.
pub fn kfold(cfg: &NetworkConfig, ds: &Dataset, plan: &SplitPlan, k: usize) -> Result<Vec<FoldResult>> {
    let fold_of: Vec<usize> = ds
        .ids
        .iter()
        .map(|id| plan.folds.get(id).copied().ok_or_else(|| Error::UnknownImage(id.clone())))
        .collect::<Result<_>>()?;
    (0..k)
        .into_par_iter()
        .map(|f| {
            let (val, train): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| fold_of[i] == f);
            let out = train_fold(cfg, ds, &train, &val)?;
            Ok(FoldResult {
                fold: f,
                best_epoch: out.best_epoch,
                val: evaluate(&out.params, ds, &val)?,
            })
        })
        .collect()
}

fn train_fold(cfg: &NetworkConfig, ds: &Dataset, train_idx: &[usize], val_idx: &[usize]) -> Result<TrainOutcome> {
    train(cfg, ds, train_idx, val_idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerError {
    pub network: String,
    pub layer: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub activation: Activation,
    pub max_relative_error: f64,
    pub parameters_checked: usize,
    pub step: f64,
    /// Denominator floor: |a − n| / max(|a|, |n|, floor).
    pub floor: f64,
    pub input_perturbations: usize,
    pub min_abs_preactivation: f64,
    pub layers: Vec<LayerError>,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;
const KINK_MARGIN: f64 = 1e-3;

fn min_abs_preactivation(params: &MtnnlParams, xs: &DMatrix<f64>, vpi: &DMatrix<f64>) -> f64 {
    let act = params.config.activation;
    let hidden_min = |m: &Mlp, x: &DMatrix<f64>| {
        let (_, cache) = m.forward(x, act);
        cache.pre[..cache.pre.len() - 1]
            .iter()
            .flat_map(|z| z.iter())
            .fold(f64::INFINITY, |a, v| a.min(v.abs()))
    };
    let mut min = hidden_min(&params.g, &params.g_input(xs, Some(vpi)));
    if let Some(f) = &params.f {
        min = min.min(hidden_min(f, xs));
    }
    min
}

/// Analytic gradient of the teacher-forced loss against central finite
/// differences, over every parameter. For relu the sample is jittered until
/// every hidden pre-activation is at least 1e-3 from the kink.
pub fn gradient_check_params(params: &MtnnlParams, ds: &Dataset, idx: &[usize], seed: u64) -> Result<GradientCheck> {
    if idx.is_empty() {
        return Err(Error::EmptySample);
    }
    let (rows, vpi, vata) = gather(ds, idx);
    let mut xs = params.standardize(&rows)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perturbations = 0;
    let mut margin = min_abs_preactivation(params, &xs, &vpi);
    if params.config.activation == Activation::Relu {
        while margin < KINK_MARGIN {
            if perturbations >= 10_000 {
                return Err(Error::Numeric("could not move the sample away from relu kinks".into()));
            }
            xs.iter_mut().for_each(|v| *v += 0.01 * rng.sample::<f64, _>(StandardNormal));
            margin = min_abs_preactivation(params, &xs, &vpi);
            perturbations += 1;
        }
    }
    let (_, grads) = batch_loss_and_grads(params, &xs, &vpi, &vata, true);
    let grads = grads.unwrap();
    let n_f = params.f.as_ref().map_or(0, |f| f.layers.len());

    let mut work = params.clone();
    let mut layers = Vec::new();
    let mut overall: f64 = 0.0;
    let mut checked = 0;
    let eval = |p: &MtnnlParams| batch_loss_and_grads(p, &xs, &vpi, &vata, false).0.total;
    for (li, g) in grads.iter().enumerate() {
        let mut layer_max: f64 = 0.0;
        let total = g.w.len() + g.b.len();
        for e in 0..total {
            let analytic = if e < g.w.len() { g.w.as_slice()[e] } else { g.b[e - g.w.len()] };
            let mut numeric = 0.0;
            for (sign, weight) in [(1.0, 0.5), (-1.0, -0.5)] {
                {
                    let layer = work.layers_mut().nth(li).unwrap();
                    let slot = if e < layer.w.len() { &mut layer.w.as_mut_slice()[e] } else { &mut layer.b[e - g.w.len()] };
                    *slot += sign * GRAD_CHECK_STEP;
                }
                numeric += weight * eval(&work) / GRAD_CHECK_STEP;
                let layer = work.layers_mut().nth(li).unwrap();
                let original = params.layers().nth(li).unwrap();
                if e < layer.w.len() {
                    layer.w.as_mut_slice()[e] = original.w.as_slice()[e];
                } else {
                    layer.b[e - g.w.len()] = original.b[e - g.w.len()];
                }
            }
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            layer_max = layer_max.max(err);
            checked += 1;
        }
        overall = overall.max(layer_max);
        let (network, layer) = if li < n_f { ("f", li) } else { ("g", li - n_f) };
        layers.push(LayerError {
            network: network.into(),
            layer,
            max_relative_error: layer_max,
        });
    }
    Ok(GradientCheck {
        activation: params.config.activation,
        max_relative_error: overall,
        parameters_checked: checked,
        step: GRAD_CHECK_STEP,
        floor: GRAD_CHECK_FLOOR,
        input_perturbations: perturbations,
        min_abs_preactivation: margin,
        layers,
    })
}

/// Gradient check on freshly initialized parameters for `cfg`.
pub fn gradient_check(cfg: &NetworkConfig, ds: &Dataset, idx: &[usize]) -> Result<GradientCheck> {
    let mut params = MtnnlParams::init(cfg)?;
    let (im, is) = column_stats(idx.iter().map(|&i| ds.x[i].clone()), cfg.input_dim);
    params.input_means = im;
    params.input_scales = is;
    // nonzero biases so the check exercises them
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xb1a5);
    for l in params.layers_mut() {
        l.b.iter_mut().for_each(|b| *b = 0.1 * rng.sample::<f64, _>(StandardNormal));
    }
    gradient_check_params(&params, ds, idx, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy(n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let vpi: Vec<[f64; VPI_COUNT]> = x
            .iter()
            .map(|r| std::array::from_fn(|k| 2.5 + 0.5 * r[k % d] - 0.3 * r[(k + 1) % d]))
            .collect();
        let vata = vpi.iter().zip(&x).map(|(v, r)| 0.2 * v[0] + 0.3 * v[3] + 0.1 * r[0]).collect();
        Dataset {
            ids: (0..n).map(|i| format!("i{i}")).collect(),
            x,
            vpi,
            vata,
        }
    }

    fn small(d: usize, act: Activation) -> NetworkConfig {
        NetworkConfig {
            input_dim: d,
            hidden_f: vec![8, 6],
            hidden_g: vec![7],
            activation: act,
            ..Default::default()
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut p = MtnnlParams::init(&small(4, Activation::Relu)).unwrap();
        for l in p.layers_mut() {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        let out = p.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert!(out.vpi.iter().all(|v| *v == 0.0));
        assert_eq!(out.vata, 0.0);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let p = MtnnlParams::init(&small(4, Activation::Relu)).unwrap();
        assert!(matches!(p.forward(&[1.0, 2.0]), Err(Error::Shape { expected: 4, got: 2 })));
    }

    /// Straight-line per-sample re-implementation of the forward algebra.
    fn naive_mlp(layers: &[Layer], x: &[f64], act: Activation) -> Vec<f64> {
        let mut a = x.to_vec();
        for (l, layer) in layers.iter().enumerate() {
            let mut z = vec![0.0; layer.w.nrows()];
            for o in 0..layer.w.nrows() {
                let mut s = layer.b[o];
                for i in 0..layer.w.ncols() {
                    s += layer.w[(o, i)] * a[i];
                }
                z[o] = s;
            }
            a = if l + 1 == layers.len() {
                z
            } else {
                z.into_iter()
                    .map(|v| match act {
                        Activation::Relu => {
                            if v > 0.0 {
                                v
                            } else {
                                0.0
                            }
                        }
                        Activation::Tanh => v.tanh(),
                    })
                    .collect()
            };
        }
        a
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let ds = toy(10, 5, 2);
        let mut p = MtnnlParams::init(&small(5, Activation::Relu)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for l in p.layers_mut() {
            l.b.iter_mut().for_each(|b| *b = rng.sample(StandardNormal));
        }
        p.input_means = vec![0.1; 5];
        p.input_scales = vec![1.5; 5];
        for row in &ds.x {
            let z: Vec<f64> = row.iter().map(|v| (v - 0.1) / 1.5).collect();
            let vpi = naive_mlp(&p.f.as_ref().unwrap().layers, &z, Activation::Relu);
            let gin: Vec<f64> = z.iter().copied().chain(vpi.iter().copied()).collect();
            let vata = naive_mlp(&p.g.layers, &gin, Activation::Relu)[0];
            let got = p.forward(row).unwrap();
            for (a, b) in got.vpi.iter().zip(&vpi) {
                assert!((a - b).abs() < 1e-10);
            }
            assert!((got.vata - vata).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_endpoints_and_linearity() {
        let vp = [1.0, 2.0, 3.0];
        let vt = [1.5, 2.0, 2.0];
        let a1 = loss(&vp, &vt, 2.0, 3.0, 1.0);
        assert_eq!(a1.total, a1.l_f);
        let a0 = loss(&vp, &vt, 2.0, 3.0, 0.0);
        assert_eq!(a0.total, a0.l_g);
        let half = loss(&vp, &vt, 2.0, 3.0, 0.5);
        assert!((half.total - (a0.total + a1.total) / 2.0).abs() < 1e-12);
        assert_eq!(loss(&vt, &vt, 3.0, 3.0, 0.5).total, 0.0);
    }

    #[test]
    fn split_counts_per_stratum() {
        let ids: Vec<String> = (0..500).map(|i| format!("i{i}")).collect();
        let labels: Vec<usize> = (0..500).map(|i| i % 5).collect();
        let p = split(&ids, &labels, (0.6, 0.2, 0.2), 5, 1).unwrap();
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (300, 100, 100));
        for s in 0..5 {
            let count = |set: &[String]| set.iter().filter(|id| p.strata[*id] == s).count();
            assert_eq!((count(&p.train), count(&p.val), count(&p.test)), (60, 20, 20));
            let mut per_fold = [0usize; 5];
            for (id, f) in &p.folds {
                if p.strata[id] == s {
                    per_fold[*f] += 1;
                }
            }
            let (lo, hi) = (per_fold.iter().min().unwrap(), per_fold.iter().max().unwrap());
            assert!(hi - lo <= 1);
        }
        let q = split(&ids, &labels, (0.6, 0.2, 0.2), 5, 2).unwrap();
        assert_ne!(p.train, q.train);
        let all = split(&ids, &labels, (1.0, 0.0, 0.0), 5, 1).unwrap();
        assert_eq!(all.train.len(), 500);
        let small_labels: Vec<usize> = (0..500).map(|i| if i < 4 { 9 } else { 0 }).collect();
        assert!(matches!(
            split(&ids, &small_labels, (0.6, 0.2, 0.2), 5, 1),
            Err(Error::StratumTooSmall { stratum: 9, size: 4 })
        ));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = toy(40, 4, 3);
        let cfg = NetworkConfig {
            learning_rate: 0.0,
            epochs: 5,
            ..small(4, Activation::Tanh)
        };
        let idx: Vec<usize> = (0..40).collect();
        let out = train(&cfg, &ds, &idx[..30], &idx[30..]).unwrap();
        assert!(out.history.windows(2).all(|w| w[0].train_loss == w[1].train_loss));
        let mut init = MtnnlParams::init(&cfg).unwrap();
        init.input_means = out.params.input_means.clone();
        init.input_scales = out.params.input_scales.clone();
        assert_eq!(init.f.as_ref().unwrap().layers[0], out.params.f.as_ref().unwrap().layers[0]);
    }

    #[test]
    fn training_is_deterministic_and_checkpoint_is_best() {
        let ds = toy(60, 4, 4);
        let cfg = NetworkConfig {
            epochs: 30,
            learning_rate: 0.01,
            ..small(4, Activation::Relu)
        };
        let idx: Vec<usize> = (0..60).collect();
        let a = train(&cfg, &ds, &idx[..40], &idx[40..]).unwrap();
        let b = train(&cfg, &ds, &idx[..40], &idx[40..]).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
        let last = a.history.last().unwrap().val_loss;
        let at_best = set_loss(&a.params, &ds, &idx[40..]).unwrap().total;
        assert!(at_best <= last);
        assert_eq!(at_best, a.best_val_loss);
    }

    #[test]
    fn inference_differs_from_teacher_forcing() {
        let ds = toy(20, 4, 5);
        let p = MtnnlParams::init(&small(4, Activation::Tanh)).unwrap();
        let rows: Vec<&[f64]> = ds.x.iter().map(Vec::as_slice).collect();
        let inf = p.forward_batch(&rows, None).unwrap();
        let tf = p.forward_batch(&rows, Some(&ds.vpi)).unwrap();
        assert!(inf.iter().zip(&tf).any(|(a, b)| a.vata != b.vata));
    }

    #[test]
    fn constant_predictor_has_zero_r2() {
        let ds = toy(50, 4, 6);
        let mut p = MtnnlParams::init(&small(4, Activation::Relu)).unwrap();
        for l in p.layers_mut() {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        let mean = ds.vata.iter().sum::<f64>() / 50.0;
        p.g.layers.last_mut().unwrap().b[0] = mean;
        let idx: Vec<usize> = (0..50).collect();
        let e = evaluate(&p, &ds, &idx).unwrap();
        assert!(e.vata.r2.abs() < 1e-12);
    }

    #[test]
    fn gradient_check_tanh_and_relu() {
        let ds = toy(6, 5, 7);
        let idx: Vec<usize> = (0..6).collect();
        let t = gradient_check(&small(5, Activation::Tanh), &ds, &idx).unwrap();
        assert!(t.max_relative_error < 1e-6, "{t:?}");
        let r = gradient_check(&small(5, Activation::Relu), &ds, &idx).unwrap();
        assert!(r.max_relative_error < 1e-5, "{r:?}");
        assert!(r.min_abs_preactivation >= 1e-3);
    }

    #[test]
    fn gradient_check_zero_weights_tanh() {
        let ds = toy(6, 5, 8);
        let idx: Vec<usize> = (0..6).collect();
        let mut p = MtnnlParams::init(&small(5, Activation::Tanh)).unwrap();
        for l in p.layers_mut() {
            l.w.fill(0.0);
        }
        let c = gradient_check_params(&p, &ds, &idx, 1).unwrap();
        assert!(c.max_relative_error < 1e-6, "{c:?}");
    }

    #[test]
    fn single_task_capacity_is_matched() {
        let cfg = NetworkConfig {
            input_dim: 60,
            ..Default::default()
        };
        let st = cfg.matched_single_task();
        let (a, b) = (cfg.parameter_count() as f64, st.parameter_count() as f64);
        assert!((a - b).abs() / a < 0.01, "{a} vs {b}");
        assert!(!st.multi_task);
    }

    #[test]
    fn params_round_trip_json() {
        let p = MtnnlParams::init(&small(4, Activation::Relu)).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let back: MtnnlParams = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn loss_is_affine_in_alpha(
            vp in prop::collection::vec(0.0f64..5.0, VPI_COUNT),
            vt in prop::collection::vec(0.0f64..5.0, VPI_COUNT),
            yp in 0.0f64..5.0, yt in 0.0f64..5.0,
        ) {
            let l0 = loss(&vp, &vt, yp, yt, 0.0).total;
            let l1 = loss(&vp, &vt, yp, yt, 1.0).total;
            let lh = loss(&vp, &vt, yp, yt, 0.5).total;
            prop_assert!((lh - (l0 + l1) / 2.0).abs() < 1e-12);
        }
    }
}
