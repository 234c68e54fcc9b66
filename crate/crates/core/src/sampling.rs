//! Streetscape clustering, stratified survey sampling and sample-size
//! diagnostics.

use std::collections::{BTreeMap, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 5,
            restarts: 10,
            max_iter: 300,
            tol: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Inertia after each assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
    /// Final inertia of every restart, in restart order.
    pub restart_inertia: Vec<f64>,
    /// Empty clusters re-seeded at the farthest point.
    pub repairs: usize,
}

impl ClusterModel {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Index of the nearest centroid.
    pub fn assign(&self, point: &[f64]) -> usize {
        nearest(point, &self.centroids).0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centroids.last().unwrap()));
        }
    }
    centroids
}

struct Run {
    centroids: Vec<Vec<f64>>,
    labels: Vec<usize>,
    inertia: f64,
    converged: bool,
    iterations: usize,
    history: Vec<f64>,
    repairs: usize,
}

fn lloyd(points: &[Vec<f64>], cfg: &KMeansConfig, rng: &mut ChaCha8Rng) -> Run {
    let (n, dim, k) = (points.len(), points[0].len(), cfg.k);
    let mut centroids = plus_plus_seeds(points, k, rng);
    let mut labels = vec![0; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::new();
    let mut repairs = 0;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_iter {
        iterations += 1;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            labels[i] = j;
            dists[i] = d;
        }
        // empty clusters take the point farthest from its centroid
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n >= k guarantees a donor cluster");
                log::warn!("k-means: cluster {j} empty, re-seeded at point {far}");
                counts[labels[far]] -= 1;
                counts[j] = 1;
                labels[far] = j;
                dists[far] = 0.0;
                centroids[j] = points[far].clone();
                repairs += 1;
            }
        }
        let inertia: f64 = dists.iter().sum();
        if let Some(prev) = history.last() {
            debug_assert!(inertia <= prev * (1.0 + 1e-12) + 1e-12, "inertia rose: {prev} -> {inertia}");
        }
        history.push(inertia);

        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        let mut shift: f64 = 0.0;
        for (j, s) in sums.into_iter().enumerate() {
            let c: Vec<f64> = s.into_iter().map(|v| v / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&c, &centroids[j]).sqrt());
            centroids[j] = c;
        }
        if shift < cfg.tol {
            converged = true;
            break;
        }
    }
    // final assignment against the updated centroids; if coincident
    // centroids would leave a cluster empty, the repaired labels stand
    let assigned: Vec<(usize, f64)> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut counts = vec![0usize; k];
    assigned.iter().for_each(|&(l, _)| counts[l] += 1);
    if counts.contains(&0) {
        for (i, p) in points.iter().enumerate() {
            dists[i] = sq_dist(p, &centroids[labels[i]]);
        }
    } else {
        for (i, (l, d)) in assigned.into_iter().enumerate() {
            labels[i] = l;
            dists[i] = d;
        }
    }
    let mut inertia: f64 = dists.iter().sum();
    history.push(inertia);
    if hartigan(points, &mut labels, &mut centroids) {
        inertia = points
            .iter()
            .zip(&labels)
            .map(|(p, &l)| sq_dist(p, &centroids[l]))
            .sum::<f64>()
            .min(inertia);
        history.push(inertia);
    }
    Run {
        centroids,
        labels,
        inertia,
        converged,
        iterations,
        history,
        repairs,
    }
}

/// Single-point transfers that lower inertia, applied until none remains.
/// Lloyd fixed points are not always transfer-stable, so this escapes some
/// poor local optima. Returns whether any point moved.
fn hartigan(points: &[Vec<f64>], labels: &mut [usize], centroids: &mut [Vec<f64>]) -> bool {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    let mut moved_any = false;
    for _ in 0..100 {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let a = labels[i];
            if counts[a] <= 1 {
                continue;
            }
            let na = counts[a] as f64;
            let remove_gain = na / (na - 1.0) * sq_dist(p, &centroids[a]);
            let mut best: Option<(usize, f64)> = None;
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let add_cost = nb / (nb + 1.0) * sq_dist(p, &centroids[b]);
                let delta = add_cost - remove_gain;
                if delta < -1e-12 * (1.0 + remove_gain) && best.is_none_or(|(_, d)| delta < d) {
                    best = Some((b, delta));
                }
            }
            if let Some((b, _)) = best {
                let (na, nb) = (counts[a] as f64, counts[b] as f64);
                for (c, x) in centroids[a].iter_mut().zip(p) {
                    *c = (*c * na - x) / (na - 1.0);
                }
                for (c, x) in centroids[b].iter_mut().zip(p) {
                    *c = (*c * nb + x) / (nb + 1.0);
                }
                counts[a] -= 1;
                counts[b] += 1;
                labels[i] = b;
                moved = true;
                moved_any = true;
            }
        }
        if !moved {
            break;
        }
    }
    if moved_any {
        // recompute means exactly to shed incremental rounding
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &l) in points.iter().zip(labels.iter()) {
            sums[l].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for (j, s) in sums.into_iter().enumerate() {
            centroids[j] = s.into_iter().map(|v| v / counts[j] as f64).collect();
        }
    }
    moved_any
}

/// Relabels clusters in order of first appearance so labels are canonical.
fn canonicalize(run: &mut Run, k: usize) {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    for &l in &run.labels {
        if map[l] == usize::MAX {
            map[l] = next;
            next += 1;
        }
    }
    for m in map.iter_mut().filter(|m| **m == usize::MAX) {
        *m = next;
        next += 1;
    }
    let mut centroids = vec![Vec::new(); k];
    for (old, c) in run.centroids.drain(..).enumerate() {
        centroids[map[old]] = c;
    }
    run.centroids = centroids;
    run.labels.iter_mut().for_each(|l| *l = map[*l]);
}

/// k-means++ seeded Lloyd iterations, best of `cfg.restarts` independent
/// restarts.
pub fn kmeans(points: &[Vec<f64>], cfg: &KMeansConfig) -> Result<ClusterModel> {
    let n = points.len();
    if cfg.k == 0 || n < cfg.k {
        return Err(Error::config(format!("kmeans needs n >= k >= 1 (n = {n}, k = {})", cfg.k)));
    }
    if cfg.restarts == 0 || cfg.max_iter == 0 {
        return Err(Error::config("kmeans needs restarts >= 1 and max_iter >= 1"));
    }
    let dim = points[0].len();
    if let Some(bad) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::Shape {
            expected: dim,
            got: bad.len(),
        });
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature in k-means input".into()));
    }
    let runs: Vec<Run> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(r as u64);
            lloyd(points, cfg, &mut rng)
        })
        .collect();
    let restart_inertia: Vec<f64> = runs.iter().map(|r| r.inertia).collect();
    let best = (0..runs.len())
        .min_by(|&a, &b| restart_inertia[a].total_cmp(&restart_inertia[b]).then(a.cmp(&b)))
        .unwrap();
    let mut run = runs.into_iter().nth(best).unwrap();
    canonicalize(&mut run, cfg.k);
    Ok(ClusterModel {
        k: cfg.k,
        centroids: run.centroids,
        labels: run.labels,
        inertia: run.inertia,
        converged: run.converged,
        iterations: run.iterations,
        inertia_history: run.history,
        restart_inertia,
        repairs: run.repairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedSample {
    /// Sampled ids grouped by class, class 0 first.
    pub ids: Vec<String>,
    pub by_class: BTreeMap<usize, Vec<String>>,
    pub n_per_class: usize,
    pub seed: u64,
}

impl StratifiedSample {
    /// A nested sub-sample holding the first `size / classes` ids of every
    /// class (remainder to the lowest classes).
    pub fn prefix(&self, size: usize) -> Vec<String> {
        let k = self.by_class.len().max(1);
        let mut out = Vec::with_capacity(size);
        for (i, ids) in self.by_class.values().enumerate() {
            let take = size / k + usize::from(i < size % k);
            out.extend(ids.iter().take(take).cloned());
        }
        out
    }
}

/// Uniform sampling without replacement of exactly `n_per_class` ids from
/// every class present in `labels`.
pub fn stratified_sample(
    ids: &[String],
    labels: &[usize],
    n_per_class: usize,
    seed: u64,
) -> Result<StratifiedSample> {
    if ids.len() != labels.len() {
        return Err(Error::Shape {
            expected: ids.len(),
            got: labels.len(),
        });
    }
    let mut classes: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
    for (id, &l) in ids.iter().zip(labels) {
        classes.entry(l).or_default().push(id);
    }
    if let Some((&class, members)) = classes.iter().find(|(_, m)| m.len() < n_per_class) {
        return Err(Error::InsufficientClass {
            class,
            available: members.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class = BTreeMap::new();
    let mut all = Vec::with_capacity(n_per_class * classes.len());
    for (class, members) in classes {
        let chosen: Vec<String> = members
            .choose_multiple(&mut rng, n_per_class)
            .map(|s| (*s).clone())
            .collect();
        all.extend(chosen.iter().cloned());
        by_class.insert(class, chosen);
    }
    Ok(StratifiedSample {
        ids: all,
        by_class,
        n_per_class,
        seed,
    })
}

/// Uniform random sample of `size` ids, the baseline for coverage checks.
pub fn random_sample(ids: &[String], size: usize, seed: u64) -> Result<Vec<String>> {
    if size > ids.len() {
        return Err(Error::InsufficientItems(ids.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = ids.to_vec();
    v.shuffle(&mut rng);
    v.truncate(size);
    Ok(v)
}

pub const COVERAGE_DEFINITION: &str = "coverage = fraction of population-occupied cells of a \
grid_bins x grid_bins grid over (PC1, PC2) of the standardized population features that hold \
at least one sample point; similarity = histogram intersection of the normalized population \
and sample histograms on the same grid";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub definition: String,
    pub grid_bins: usize,
    pub population_size: usize,
    pub sample_size: usize,
    pub occupied_cells: usize,
    pub covered_cells: usize,
    pub coverage: f64,
    pub similarity: f64,
    pub explained_variance_ratio: Vec<f64>,
}

fn bin(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo) * bins as f64).floor() as usize).min(bins - 1)
}

/// Occupancy coverage and histogram similarity of a sample within the
/// population, on the first two principal components.
pub fn coverage_report(
    population_ids: &[String],
    population: &[Vec<f64>],
    sample_ids: &[String],
    grid_bins: usize,
) -> Result<CoverageReport> {
    if sample_ids.is_empty() {
        return Err(Error::EmptySample);
    }
    if grid_bins == 0 {
        return Err(Error::config("grid_bins must be at least 1"));
    }
    if population_ids.len() != population.len() {
        return Err(Error::Shape {
            expected: population_ids.len(),
            got: population.len(),
        });
    }
    let index: HashMap<&str, usize> = population_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let sample: Vec<usize> = sample_ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::UnknownImage(id.clone()))
        })
        .collect::<Result<_>>()?;

    let p = stats::pca(population, 2)?;
    let proj = p.transform(population);
    let comps = proj.first().map_or(0, Vec::len);
    let range = |c: usize| {
        proj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r[c]), hi.max(r[c]))
        })
    };
    let ranges: Vec<(f64, f64)> = (0..comps).map(range).collect();
    let cell = |row: &[f64]| -> (usize, usize) {
        let b = |c: usize| {
            ranges
                .get(c)
                .map_or(0, |&(lo, hi)| bin(row[c], lo, hi, grid_bins))
        };
        (b(0), b(1))
    };

    // ordered maps keep the similarity sum reproducible
    let mut pop_hist: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for row in &proj {
        *pop_hist.entry(cell(row)).or_default() += 1;
    }
    let mut sample_hist: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for &i in &sample {
        *sample_hist.entry(cell(&proj[i])).or_default() += 1;
    }
    let covered = sample_hist.len();
    let n_pop = proj.len() as f64;
    let n_s = sample.len() as f64;
    let similarity: f64 = pop_hist
        .iter()
        .map(|(c, &cnt)| {
            let s = sample_hist.get(c).copied().unwrap_or(0) as f64 / n_s;
            (cnt as f64 / n_pop).min(s)
        })
        .sum();
    Ok(CoverageReport {
        definition: COVERAGE_DEFINITION.to_string(),
        grid_bins,
        population_size: population.len(),
        sample_size: sample.len(),
        occupied_cells: pop_hist.len(),
        covered_cells: covered,
        coverage: covered as f64 / pop_hist.len() as f64,
        similarity: similarity.clamp(0.0, 1.0),
        explained_variance_ratio: p.explained_variance_ratio,
    })
}

pub const KS_GATE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub size: usize,
    pub ks_statistic: f64,
    pub below_gate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub gate: f64,
    pub reference_size: usize,
    pub rows: Vec<ConvergenceRow>,
}

/// K-S statistic between the score distribution at each size and at the
/// largest size.
pub fn convergence_report(scores_by_size: &[(usize, Vec<f64>)]) -> Result<ConvergenceReport> {
    let (reference_size, reference) = scores_by_size
        .last()
        .ok_or_else(|| Error::config("convergence_report needs at least one size"))?;
    if scores_by_size.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::config("sizes must be strictly ascending"));
    }
    let rows = scores_by_size
        .iter()
        .map(|(size, scores)| {
            let d = stats::ks_statistic(scores, reference);
            ConvergenceRow {
                size: *size,
                ks_statistic: d,
                below_gate: d < KS_GATE,
            }
        })
        .collect();
    Ok(ConvergenceReport {
        gate: KS_GATE,
        reference_size: *reference_size,
        rows,
    })
}
