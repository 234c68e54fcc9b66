//! Two-player, no-draw TrueSkill rating of survey comparisons.
//!
//! Every image starts from `N(mu0, sigma2_0)`. A comparison updates winner
//! `w` and loser `l` with
//!
//! ```text
//! c² = σ_w² + σ_l² + 2β²      t = (μ_w − μ_l)/c
//! v(t) = φ(t)/Φ(t)            w(t) = v(t)(v(t) + t)
//! μ_w' = μ_w + (σ_w²/c)·v(t)  μ_l' = μ_l − (σ_l²/c)·v(t)
//! σ'²  = σ²·(1 − (σ²/c²)·w(t))
//! ```
//!
//! [`UpdateRule::Simplified`] replaces the variance factor `w(t)` by one,
//! which makes the variance update independent of the outcome.

use std::collections::HashMap;
use std::f64::consts::{PI, SQRT_2};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data::{fmt_f64, PairwiseComparison};
use crate::error::{Error, Result};
use crate::indicator::Indicator;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub mu: f64,
    pub sigma2: f64,
}

impl Rating {
    pub fn new(mu: f64, sigma2: f64) -> Self {
        Rating { mu, sigma2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    #[default]
    Full,
    Simplified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub mu0: f64,
    pub sigma2_0: f64,
    pub beta2: f64,
    pub repeats: usize,
    pub target_std: f64,
    pub seed: u64,
    pub update_rule: UpdateRule,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            mu0: 2.5,
            sigma2_0: 1.0,
            beta2: 1.0,
            repeats: 20,
            target_std: 1.0,
            seed: 0,
            update_rule: UpdateRule::Full,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2_0 > 0.0 && self.beta2 > 0.0) {
            return Err(Error::config("scoring variances must be positive"));
        }
        if self.repeats == 0 {
            return Err(Error::config("scoring repeats must be at least 1"));
        }
        if !(self.target_std > 0.0) {
            return Err(Error::config("target_std must be positive"));
        }
        Ok(())
    }
}

fn normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * PI).sqrt()
}

fn normal_cdf(t: f64) -> f64 {
    0.5 * erfc(-t / SQRT_2)
}

/// Truncated-Gaussian mean correction `φ(t)/Φ(t)`.
pub fn v_win(t: f64) -> f64 {
    if t < -30.0 {
        // Mills-ratio expansion; φ and Φ both underflow here
        let t2 = t * t;
        -t / (1.0 - 1.0 / t2 + 3.0 / (t2 * t2))
    } else {
        normal_pdf(t) / normal_cdf(t)
    }
}

/// Truncated-Gaussian variance correction `v(t)(v(t) + t)`.
pub fn w_win(t: f64) -> f64 {
    let v = v_win(t);
    (v * (v + t)).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
}

/// Updates a (winner, loser) pair after one comparison.
pub fn update_pair(winner: Rating, loser: Rating, beta2: f64, rule: UpdateRule) -> Result<(Rating, Rating)> {
    let inputs = [winner.mu, winner.sigma2, loser.mu, loser.sigma2, beta2];
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("rating update input".into()));
    }
    if !(winner.sigma2 > 0.0 && loser.sigma2 > 0.0) {
        return Err(Error::Numeric("rating variance must be positive".into()));
    }
    let c2 = winner.sigma2 + loser.sigma2 + 2.0 * beta2;
    let c = c2.sqrt();
    let t = (winner.mu - loser.mu) / c;
    let v = v_win(t);
    let w = match rule {
        UpdateRule::Full => w_win(t),
        UpdateRule::Simplified => 1.0,
    };
    let new_w = Rating {
        mu: winner.mu + winner.sigma2 / c * v,
        sigma2: winner.sigma2 * (1.0 - winner.sigma2 / c2 * w),
    };
    let new_l = Rating {
        mu: loser.mu - loser.sigma2 / c * v,
        sigma2: loser.sigma2 * (1.0 - loser.sigma2 / c2 * w),
    };
    Ok((new_w, new_l))
}

/// Per-image output of [`run_ranking`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub image_ids: Vec<String>,
    /// Mean final μ over repeats.
    pub mean_mu: Vec<f64>,
    /// Mean final σ² over repeats.
    pub mean_sigma2: Vec<f64>,
    /// Across-repeat variance of final μ.
    pub repeat_variance: Vec<f64>,
    pub n_comparisons: usize,
}

/// Replays the comparisons of one indicator `cfg.repeats` times, each time in
/// an independently shuffled order, and averages the final means.
pub fn run_ranking(
    comparisons: &[PairwiseComparison],
    indicator: Indicator,
    image_ids: &[String],
    cfg: &ScoringConfig,
) -> Result<RankingResult> {
    cfg.validate()?;
    let index: HashMap<&str, usize> = image_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for c in comparisons.iter().filter(|c| c.indicator == indicator) {
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::UnknownImage(id.to_string()))
        };
        pairs.push((lookup(c.winner_id())?, lookup(c.loser_id())?));
    }
    if pairs.is_empty() {
        return Err(Error::Degenerate(format!(
            "no comparisons for indicator {indicator}"
        )));
    }

    let n = image_ids.len();
    let mut sum_mu = vec![0.0; n];
    let mut sum_mu2 = vec![0.0; n];
    let mut sum_sigma2 = vec![0.0; n];
    let mut order = pairs.clone();
    for repeat in 0..cfg.repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(repeat as u64 + 1);
        order.copy_from_slice(&pairs);
        order.shuffle(&mut rng);

        let mut ratings = vec![Rating::new(cfg.mu0, cfg.sigma2_0); n];
        for &(w, l) in &order {
            let (nw, nl) = update_pair(ratings[w], ratings[l], cfg.beta2, cfg.update_rule)?;
            ratings[w] = nw;
            ratings[l] = nl;
        }
        for (i, r) in ratings.iter().enumerate() {
            sum_mu[i] += r.mu;
            sum_mu2[i] += r.mu * r.mu;
            sum_sigma2[i] += r.sigma2;
        }
    }
    let reps = cfg.repeats as f64;
    let mean_mu: Vec<f64> = sum_mu.iter().map(|s| s / reps).collect();
    let repeat_variance = sum_mu2
        .iter()
        .zip(&mean_mu)
        .map(|(s2, m)| (s2 / reps - m * m).max(0.0))
        .collect();
    Ok(RankingResult {
        image_ids: image_ids.to_vec(),
        mean_mu,
        mean_sigma2: sum_sigma2.iter().map(|s| s / reps).collect(),
        repeat_variance,
        n_comparisons: pairs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreWarning {
    DegenerateSpread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalized {
    pub scores: Vec<f64>,
    pub warning: Option<ScoreWarning>,
}

/// Min-max maps raw scores onto [0, 5].
pub fn normalize_scores(raw: &[f64]) -> Result<Normalized> {
    if raw.len() < 2 {
        return Err(Error::InsufficientItems(raw.len()));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(min.is_finite() && max.is_finite()) {
        return Err(Error::Numeric("raw scores".into()));
    }
    if max == min {
        return Ok(Normalized {
            scores: vec![2.5; raw.len()],
            warning: Some(ScoreWarning::DegenerateSpread),
        });
    }
    Ok(Normalized {
        scores: raw.iter().map(|s| (s - min) / (max - min) * 5.0).collect(),
        warning: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rescaled {
    pub scores: Vec<f64>,
    pub clip_count: usize,
}

/// Affinely rescales to the given population standard deviation and mean,
/// then clips to [0, 5].
pub fn rescale_to_std(scores: &[f64], target_std: f64, center: f64) -> Result<Rescaled> {
    if scores.len() < 2 {
        return Err(Error::InsufficientItems(scores.len()));
    }
    let (mean, std) = crate::linalg::mean_std(scores);
    if std == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let mut clip_count = 0;
    let out = scores
        .iter()
        .map(|s| {
            let v = (s - mean) / std * target_std + center;
            if !(0.0..=5.0).contains(&v) {
                clip_count += 1;
            }
            v.clamp(0.0, 5.0)
        })
        .collect();
    Ok(Rescaled {
        scores: out,
        clip_count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorDiagnostics {
    pub indicator: Indicator,
    pub n_comparisons: usize,
    pub repeats: usize,
    pub mean_repeat_variance: f64,
    pub max_repeat_variance: f64,
    pub clip_count: usize,
    pub degenerate_spread: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorScoring {
    pub ranking: RankingResult,
    pub normalized: Vec<f64>,
    /// Final 0-5 scores: normalized, then rescaled to `target_std` about 2.5.
    pub scores: Vec<f64>,
    pub diagnostics: IndicatorDiagnostics,
}

impl IndicatorScoring {
    /// `image_id,mu,sigma2,normalized,score`, one row per image in ranking
    /// order. Shared by the offline scorer and the survey service so both
    /// produce identical bytes.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["image_id", "mu", "sigma2", "normalized", "score"])?;
        for i in 0..self.ranking.image_ids.len() {
            w.write_record([
                self.ranking.image_ids[i].clone(),
                fmt_f64(self.ranking.mean_mu[i]),
                fmt_f64(self.ranking.mean_sigma2[i]),
                fmt_f64(self.normalized[i]),
                fmt_f64(self.scores[i]),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Rank, normalize and rescale one indicator.
pub fn score_indicator(
    comparisons: &[PairwiseComparison],
    indicator: Indicator,
    image_ids: &[String],
    cfg: &ScoringConfig,
) -> Result<IndicatorScoring> {
    let ranking = run_ranking(comparisons, indicator, image_ids, cfg)?;
    let normalized = normalize_scores(&ranking.mean_mu)?;
    let degenerate = normalized.warning.is_some();
    let (scores, clip_count) = if degenerate {
        (normalized.scores.clone(), 0)
    } else {
        let r = rescale_to_std(&normalized.scores, cfg.target_std, 2.5)?;
        (r.scores, r.clip_count)
    };
    let diagnostics = IndicatorDiagnostics {
        indicator,
        n_comparisons: ranking.n_comparisons,
        repeats: cfg.repeats,
        mean_repeat_variance: crate::linalg::mean(&ranking.repeat_variance),
        max_repeat_variance: ranking.repeat_variance.iter().copied().fold(0.0, f64::max),
        clip_count,
        degenerate_spread: degenerate,
    };
    Ok(IndicatorScoring {
        ranking,
        normalized: normalized.scores,
        scores,
        diagnostics,
    })
}

/// Spearman correlation between recovered and reference scores.
pub fn recovery_spearman(recovered: &[f64], reference: &[f64]) -> f64 {
    stats::spearman(recovered, reference)
}
