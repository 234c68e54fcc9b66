//! Synthetic world with known ground truth.
//!
//! Images fall into streetscape clusters (vegetation-rich, green-urban,
//! open-urban, mixed-urban, building-dominated) with cluster-specific feature
//! distributions. Perceptual indicators are sparse linear maps of the
//! standardized interpretable features plus noise; VATA is a sparse linear
//! map of features and indicators plus noise. Every latent indicator is then
//! mapped affinely onto [0, 5] by its population min and max.

use chrono::{Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ComfortPoint, FeatureVector, ImageRecord, IndicatorScores, PairwiseComparison, Side};
use crate::error::{Error, Result};
use crate::indicator::{Indicator, VPI_COUNT};
use crate::linalg::{self, mean_std};
use crate::schema::{schema, INTERPRETABLE_COUNT, SEGMENTATION_COUNT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_images: usize,
    pub n_clusters: usize,
    pub seed: u64,
    pub rater_noise_beta: f64,
    pub vpi_noise_sd: f64,
    pub vata_noise_sd: f64,
    /// Fraction of zero coefficients in the latent linear maps.
    pub sparsity: f64,
    /// Saturation κ of the feature-to-indicator map: each indicator is
    /// `tanh(κ·w·z)/κ` plus noise; 0 makes the map linear.
    pub vpi_saturation: f64,
    /// Width of the dense embedding block; `None` omits it.
    pub embedding_dim: Option<usize>,
    /// Relative cluster sizes; balanced when absent.
    pub cluster_weights: Option<Vec<f64>>,
    pub center_lat: f64,
    pub center_lon: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_images: 1000,
            n_clusters: 5,
            seed: 0,
            rater_noise_beta: 1.0,
            vpi_noise_sd: 0.3,
            vata_noise_sd: 0.2,
            sparsity: 0.5,
            vpi_saturation: 1.5,
            embedding_dim: Some(8),
            cluster_weights: None,
            center_lat: 1.3521,
            center_lon: 103.8198,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 || self.n_images < self.n_clusters {
            return Err(Error::config("synth needs n_images >= n_clusters >= 1"));
        }
        if !(self.rater_noise_beta > 0.0) {
            return Err(Error::config("rater_noise_beta must be positive"));
        }
        if !(self.vpi_noise_sd >= 0.0 && self.vata_noise_sd >= 0.0) {
            return Err(Error::config("noise standard deviations must be non-negative"));
        }
        if !(self.vpi_saturation >= 0.0 && self.vpi_saturation.is_finite()) {
            return Err(Error::config("vpi_saturation must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::config("sparsity must lie in [0, 1]"));
        }
        if let Some(w) = &self.cluster_weights {
            if w.len() != self.n_clusters || w.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::config("cluster_weights must be positive, one per cluster"));
            }
        }
        Ok(())
    }
}

/// Ground-truth coefficients of the latent maps. Feature weights act on
/// standardized interpretable features (`(x - if_means) / if_scales`)
/// through the saturation `tanh(κ·a)/κ`; VATA is linear in the features and
/// the raw latent indicator values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTruth {
    pub feature_names: Vec<String>,
    pub if_means: Vec<f64>,
    pub if_scales: Vec<f64>,
    /// 19 rows × 52 columns.
    pub vpi_weights: Vec<Vec<f64>>,
    pub vpi_saturation: f64,
    pub vata_if_weights: Vec<f64>,
    pub vata_vpi_weights: Vec<f64>,
    /// (min, max) of each raw indicator before mapping onto [0, 5].
    pub vpi_ranges: Vec<(f64, f64)>,
    pub vata_range: (f64, f64),
    pub cluster_labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Population {
    pub records: Vec<ImageRecord>,
    pub features: Vec<FeatureVector>,
    pub latent: Vec<IndicatorScores>,
    pub truth: LatentTruth,
}

// Boosts on the 19 segmentation logits per archetype.
const ARCHETYPES: [&[(&str, f64)]; 5] = [
    &[("vegetation", 2.6), ("terrain", 1.2), ("sky", 0.4)],
    &[("vegetation", 1.6), ("building", 1.0), ("sidewalk", 0.8), ("person", 0.4)],
    &[("sky", 2.2), ("road", 1.6), ("terrain", 0.3)],
    &[("building", 1.1), ("road", 1.1), ("car", 1.0), ("vegetation", 0.5), ("sidewalk", 0.5)],
    &[("building", 2.6), ("wall", 1.2), ("fence", 0.6)],
];

// Typical magnitude (base, spread) of the 12 pixel statistics.
const PIXEL_SCALES: [(f64, f64); 12] = [
    (120.0, 35.0),
    (7.0, 0.4),
    (0.08, 0.02),
    (40.0, 12.0),
    (45.0, 10.0),
    (50.0, 12.0),
    (55.0, 10.0),
    (60.0, 15.0),
    (2500.0, 600.0),
    (90.0, 25.0),
    (80.0, 20.0),
    (130.0, 25.0),
];

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

struct ClusterProfile {
    seg_logits: Vec<f64>,
    obj_log_rates: Vec<f64>,
    pixel_shift: Vec<f64>,
    scene_logits: Vec<f64>,
    lat: f64,
    lon: f64,
}

fn cluster_profiles(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<ClusterProfile> {
    let s = schema();
    let n_obj = s.object_columns.len();
    let n_scene = s.scene_columns.len();
    (0..cfg.n_clusters)
        .map(|k| {
            let mut seg_logits: Vec<f64> = (0..SEGMENTATION_COUNT)
                .map(|_| rng.random_range(-1.5..0.0))
                .collect();
            for &(name, boost) in ARCHETYPES[k % ARCHETYPES.len()] {
                let i = s.segmentation_classes.iter().position(|c| c == name).unwrap();
                seg_logits[i] += boost;
            }
            if k >= ARCHETYPES.len() {
                seg_logits.iter_mut().for_each(|l| *l += rng.random_range(-0.5..0.5));
            }
            ClusterProfile {
                seg_logits,
                obj_log_rates: (0..n_obj).map(|_| rng.random_range(-1.0..1.2)).collect(),
                pixel_shift: (0..PIXEL_SCALES.len())
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect(),
                scene_logits: (0..n_scene).map(|_| rng.random_range(-1.0..1.5)).collect(),
                lat: cfg.center_lat + rng.random_range(-0.08..0.08),
                lon: cfg.center_lon + rng.random_range(-0.12..0.12),
            }
        })
        .collect()
}

fn cluster_assignment(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let weights = cfg
        .cluster_weights
        .clone()
        .unwrap_or_else(|| vec![1.0; cfg.n_clusters]);
    let total: f64 = weights.iter().sum();
    // largest-remainder apportionment, every cluster at least one member
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * cfg.n_images as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q.floor() as usize).max(1)).collect();
    let mut order: Vec<usize> = (0..cfg.n_clusters).collect();
    order.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor())
            .total_cmp(&(quotas[a] - quotas[a].floor()))
            .then(a.cmp(&b))
    });
    let mut i = 0;
    while counts.iter().sum::<usize>() < cfg.n_images {
        counts[order[i % order.len()]] += 1;
        i += 1;
    }
    while counts.iter().sum::<usize>() > cfg.n_images {
        let k = (0..counts.len()).max_by_key(|&k| counts[k]).unwrap();
        counts[k] -= 1;
    }
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
        .collect();
    labels.shuffle(rng);
    labels
}

fn sparse_weights(n: usize, sparsity: f64, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < sparsity {
                0.0
            } else {
                let mag = rng.random_range(0.5..1.5) * scale;
                if rng.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            }
        })
        .collect();
    if w.iter().all(|v| *v == 0.0) && sparsity < 1.0 {
        let i = rng.random_range(0..n);
        w[i] = scale;
    }
    w
}

pub fn saturate(a: f64, kappa: f64) -> f64 {
    if kappa > 0.0 {
        (kappa * a).tanh() / kappa
    } else {
        a
    }
}

fn to_unit_range(values: &[f64]) -> ((f64, f64), Vec<f64>) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mapped = if max > min {
        values.iter().map(|v| (v - min) / (max - min) * 5.0).collect()
    } else {
        vec![2.5; values.len()]
    };
    ((min, max), mapped)
}

pub fn generate_population(cfg: &SynthConfig) -> Result<Population> {
    cfg.validate()?;
    let s = schema();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let profiles = cluster_profiles(cfg, &mut rng);
    let labels = cluster_assignment(cfg, &mut rng);

    let mut records = Vec::with_capacity(cfg.n_images);
    let mut raw = Vec::with_capacity(cfg.n_images);
    for (i, &k) in labels.iter().enumerate() {
        let p = &profiles[k];
        let seg_logits: Vec<f64> = p
            .seg_logits
            .iter()
            .map(|l| l + 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let coverage = rng.random_range(0.85..0.999);
        let segmentation: Vec<f64> = softmax(&seg_logits).into_iter().map(|v| v * coverage).collect();
        let objects: Vec<f64> = p
            .obj_log_rates
            .iter()
            .map(|r| {
                let rate = (r + 0.3 * rng.sample::<f64, _>(StandardNormal)).exp();
                Poisson::new(rate).map(|d| d.sample(&mut rng)).unwrap_or(0.0)
            })
            .collect();
        let pixel: Vec<f64> = PIXEL_SCALES
            .iter()
            .zip(&p.pixel_shift)
            .map(|(&(base, spread), shift)| {
                (base + spread * (0.8 * shift + rng.sample::<f64, _>(StandardNormal))).max(0.0)
            })
            .collect();
        let scene_logits: Vec<f64> = p
            .scene_logits
            .iter()
            .map(|l| l + 0.7 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let scene_mass = rng.random_range(0.5..0.9);
        let scene: Vec<f64> = softmax(&scene_logits).into_iter().map(|v| v * scene_mass).collect();

        let lat = p.lat + 0.012 * rng.sample::<f64, _>(StandardNormal);
        let lon = p.lon + 0.012 * rng.sample::<f64, _>(StandardNormal);
        let id = format!("svi{i:05}");
        let mut rec = ImageRecord::new(id.clone(), lat, lon)?;
        rec.capture_date = Some(format!("2022-{:02}-{:02}", 1 + i % 12, 1 + i % 28));
        records.push(rec);
        raw.push((id, segmentation, objects, pixel, scene));
    }

    let interp: Vec<Vec<f64>> = raw
        .iter()
        .map(|(_, seg, obj, pix, scn)| s.derive_interpretable(seg, obj, pix, scn))
        .collect();
    let (if_means, if_scales): (Vec<f64>, Vec<f64>) = (0..INTERPRETABLE_COUNT)
        .map(|j| {
            let (m, sd) = mean_std(&linalg::column(&interp, j));
            (m, if sd > 0.0 { sd } else { 1.0 })
        })
        .unzip();
    let z: Vec<Vec<f64>> = interp
        .iter()
        .map(|row| {
            row.iter()
                .zip(if_means.iter().zip(&if_scales))
                .map(|(x, (m, sd))| (x - m) / sd)
                .collect()
        })
        .collect();

    let embedding_proj: Option<Vec<Vec<f64>>> = cfg.embedding_dim.map(|d| {
        (0..d)
            .map(|_| {
                (0..INTERPRETABLE_COUNT)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) / (INTERPRETABLE_COUNT as f64).sqrt())
                    .collect()
            })
            .collect()
    });

    let mut features = Vec::with_capacity(cfg.n_images);
    for ((id, seg, obj, pix, scn), zi) in raw.into_iter().zip(&z) {
        let embedding = embedding_proj.as_ref().map(|proj| {
            proj.iter()
                .map(|w| {
                    let a: f64 = w.iter().zip(zi).map(|(a, b)| a * b).sum();
                    a.tanh() + 0.05 * rng.sample::<f64, _>(StandardNormal)
                })
                .collect()
        });
        features.push(FeatureVector::new(id, seg, obj, pix, scn, embedding)?);
    }

    let if_scale = 1.0 / ((INTERPRETABLE_COUNT as f64) * (1.0 - cfg.sparsity).max(0.05)).sqrt();
    let vpi_weights: Vec<Vec<f64>> = (0..VPI_COUNT)
        .map(|_| sparse_weights(INTERPRETABLE_COUNT, cfg.sparsity, if_scale, &mut rng))
        .collect();
    let vata_if_weights = sparse_weights(INTERPRETABLE_COUNT, cfg.sparsity, 0.5 * if_scale, &mut rng);
    let vpi_scale = 1.0 / ((VPI_COUNT as f64) * (1.0 - cfg.sparsity).max(0.05)).sqrt();
    let vata_vpi_weights = sparse_weights(VPI_COUNT, cfg.sparsity, vpi_scale, &mut rng);

    let vpi_noise = Normal::new(0.0, cfg.vpi_noise_sd).map_err(|e| Error::config(e.to_string()))?;
    let vata_noise = Normal::new(0.0, cfg.vata_noise_sd).map_err(|e| Error::config(e.to_string()))?;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let vpi_raw: Vec<Vec<f64>> = z
        .iter()
        .map(|zi| {
            vpi_weights
                .iter()
                .map(|w| saturate(dot(w, zi), cfg.vpi_saturation) + vpi_noise.sample(&mut rng))
                .collect()
        })
        .collect();
    let vata_raw: Vec<f64> = z
        .iter()
        .zip(&vpi_raw)
        .map(|(zi, vi)| dot(&vata_if_weights, zi) + dot(&vata_vpi_weights, vi) + vata_noise.sample(&mut rng))
        .collect();

    let mut vpi_ranges = Vec::with_capacity(VPI_COUNT);
    let mut vpi_scaled = vec![[0.0; VPI_COUNT]; cfg.n_images];
    for j in 0..VPI_COUNT {
        let (range, mapped) = to_unit_range(&linalg::column(&vpi_raw, j));
        vpi_ranges.push(range);
        for (row, v) in vpi_scaled.iter_mut().zip(mapped) {
            row[j] = v;
        }
    }
    let (vata_range, vata_scaled) = to_unit_range(&vata_raw);
    let latent = records
        .iter()
        .zip(vata_scaled.iter().zip(vpi_scaled))
        .map(|(r, (&vata, vpi))| IndicatorScores {
            image_id: r.image_id.clone(),
            vata,
            vpi,
        })
        .collect();

    Ok(Population {
        records,
        features,
        latent,
        truth: LatentTruth {
            feature_names: s.interpretable_names().to_vec(),
            if_means,
            if_scales,
            vpi_weights,
            vpi_saturation: cfg.vpi_saturation,
            vata_if_weights,
            vata_vpi_weights,
            vpi_ranges,
            vata_range,
            cluster_labels: labels,
        },
    })
}

fn timestamp(offset_secs: i64) -> String {
    let base = Utc.with_ymd_and_hms(2023, 3, 1, 8, 0, 0).unwrap();
    (base + Duration::seconds(offset_secs))
        .format("%Y-%m-%dT%H:%M:%SZ")
        .to_string()
}

/// Comparisons per simulated participant and indicator.
pub const COMPARISONS_PER_PARTICIPANT: usize = 18;

/// Simulated probit raters: the left image wins with probability
/// `Φ((s_left − s_right)/(√2·β))`.
/// Probit rater: left wins with probability Φ(diff/(√2·β)), where `diff` is
/// the left latent score minus the right one.
pub fn probit_choice<R: Rng + ?Sized>(diff: f64, beta: f64, rng: &mut R) -> Side {
    let noise: f64 = rng.sample::<f64, _>(StandardNormal) * std::f64::consts::SQRT_2 * beta;
    if noise < diff {
        Side::Left
    } else {
        Side::Right
    }
}

pub fn simulate_comparisons(
    latent: &[IndicatorScores],
    indicator: Indicator,
    n_pairs: usize,
    beta: f64,
    seed: u64,
) -> Result<Vec<PairwiseComparison>> {
    if latent.len() < 2 {
        return Err(Error::InsufficientItems(latent.len()));
    }
    if n_pairs == 0 {
        return Err(Error::config("n_pairs must be at least 1"));
    }
    if !(beta > 0.0) {
        return Err(Error::config("beta must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = latent.len();
    Ok((0..n_pairs)
        .map(|k| {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let diff = latent[a].get(indicator) - latent[b].get(indicator);
            let winner = probit_choice(diff, beta, &mut rng);
            PairwiseComparison {
                indicator,
                left_id: latent[a].image_id.clone(),
                right_id: latent[b].image_id.clone(),
                winner,
                participant_id: format!("synth-p{:04}", k / COMPARISONS_PER_PARTICIPANT),
                timestamp: timestamp(k as i64 * 7),
            }
        })
        .collect())
}

/// Simulates `pairs_per_indicator` comparisons for every indicator, in
/// indicator order.
pub fn simulate_survey(
    latent: &[IndicatorScores],
    pairs_per_indicator: usize,
    beta: f64,
    seed: u64,
) -> Result<Vec<PairwiseComparison>> {
    let mut out = Vec::with_capacity(pairs_per_indicator * crate::INDICATOR_COUNT);
    for (i, ind) in Indicator::all().into_iter().enumerate() {
        out.extend(simulate_comparisons(
            latent,
            ind,
            pairs_per_indicator,
            beta,
            seed.wrapping_add(1 + i as u64),
        )?);
    }
    Ok(out)
}

/// Linear comfort model over VATA and standardized HSNA channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComfortCoefficients {
    pub intercept: f64,
    pub vata: f64,
    pub heart_rate: f64,
    pub solar: f64,
    pub noise: f64,
    pub altitude: f64,
}

impl Default for ComfortCoefficients {
    fn default() -> Self {
        ComfortCoefficients {
            intercept: 2.0,
            vata: 1.1,
            heart_rate: -0.35,
            solar: -0.6,
            noise: -0.15,
            altitude: 0.1,
        }
    }
}

fn standardized_walk(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut acc = 0.0;
    let walk: Vec<f64> = (0..n)
        .map(|_| {
            acc += rng.sample::<f64, _>(StandardNormal);
            acc
        })
        .collect();
    let (m, sd) = mean_std(&walk);
    let sd = if sd > 0.0 { sd } else { 1.0 };
    walk.iter().map(|w| (w - m) / sd).collect()
}

/// Field path start (a campus-scale walking route).
const PATH_ORIGIN: (f64, f64) = (1.2966, 103.7764);

/// Builds a comfort path whose points take VATA values from `vata_scores` in
/// order (cycling if shorter than `n_points`).
pub fn generate_comfort_path(
    vata_scores: &[f64],
    n_points: usize,
    coeffs: &ComfortCoefficients,
    noise_sd: f64,
    seed: u64,
) -> Result<Vec<ComfortPoint>> {
    if n_points < 3 {
        return Err(Error::config("a comfort path needs at least 3 points"));
    }
    if vata_scores.is_empty() {
        return Err(Error::InsufficientItems(0));
    }
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heart = standardized_walk(n_points, &mut rng);
    let solar = standardized_walk(n_points, &mut rng);
    let loud = standardized_walk(n_points, &mut rng);
    let alt = standardized_walk(n_points, &mut rng);
    let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (mut lat, mut lon) = PATH_ORIGIN;
    let mut points = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let vata = vata_scores[i % vata_scores.len()];
        let comfort = coeffs.intercept
            + coeffs.vata * vata
            + coeffs.heart_rate * heart[i]
            + coeffs.solar * solar[i]
            + coeffs.noise * loud[i]
            + coeffs.altitude * alt[i]
            + noise.sample(&mut rng);
        points.push(ComfortPoint {
            point_id: i as u32 + 1,
            lat,
            lon,
            comfort: comfort.clamp(1.0, 10.0),
            heart_rate: 80.0 + 8.0 * heart[i],
            solar: 40_000.0 + 15_000.0 * solar[i],
            noise: 62.0 + 5.0 * loud[i],
            altitude: 20.0 + 6.0 * alt[i],
            image_id: None,
        });
        let turn = heading + 0.6 * rng.sample::<f64, _>(StandardNormal);
        lat += 0.0004 * turn.sin();
        lon += 0.0004 * turn.cos();
    }
    Ok(points)
}

/// VATA along a path: a smooth random-walk trend within [0.5, 4.5] plus
/// white noise, clamped to [0, 5].
pub fn trend_path(n_points: usize, noise_sd: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let walk = standardized_walk(n_points, &mut rng);
    let lo = walk.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = walk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    walk.iter()
        .map(|w| {
            let trend = 0.5 + 4.0 * (w - lo) / span;
            (trend + noise_sd * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 5.0)
        })
        .collect()
}

/// For each target value, the image whose VATA is nearest (ties by id).
pub fn nearest_images(latent: &[IndicatorScores], targets: &[f64]) -> Vec<(String, f64)> {
    targets
        .iter()
        .map(|t| {
            let best = latent
                .iter()
                .min_by(|a, b| {
                    (a.vata - t)
                        .abs()
                        .total_cmp(&(b.vata - t).abs())
                        .then_with(|| a.image_id.cmp(&b.image_id))
                })
                .expect("non-empty latent set");
            (best.image_id.clone(), best.vata)
        })
        .collect()
}
