use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use vata_core::synth::{self, ComfortCoefficients, SynthConfig};
use vata_core::validation::{self, PredictorBlock, PredictorSet};
use vata_core::{ComfortPoint, FeatureVector};

const N: usize = 43;

fn white(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

struct Walk {
    points: Vec<ComfortPoint>,
    vata: Vec<f64>,
    if_rows: Vec<Vec<f64>>,
}

fn walk(seed: u64) -> Walk {
    let pop = synth::generate_population(&SynthConfig { n_images: 600, seed, ..Default::default() }).unwrap();
    let targets = synth::trend_path(N, 0.3, seed + 1);
    let picked = synth::nearest_images(&pop.latent, &targets);
    let vata: Vec<f64> = picked.iter().map(|(_, v)| *v).collect();
    let by_id: std::collections::HashMap<&str, &FeatureVector> =
        pop.features.iter().map(|f| (f.image_id.as_str(), f)).collect();
    let if_rows = picked.iter().map(|(id, _)| by_id[id.as_str()].interpretable().to_vec()).collect();
    let points = synth::generate_comfort_path(&vata, N, &ComfortCoefficients::default(), 0.3, seed + 2).unwrap();
    Walk { points, vata, if_rows }
}

fn comfort(points: &[ComfortPoint]) -> Vec<f64> {
    points.iter().map(|p| p.comfort).collect()
}

#[test]
fn white_noise_pair_has_no_fit() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = white(N, &mut rng);
        let y = white(N, &mut rng);
        let fits = validation::fit_vata_comfort(&x, &y, &[]).unwrap();
        assert!(fits[0].adjusted_r2 < 0.15, "seed {seed}: {}", fits[0].adjusted_r2);
    }
}

#[test]
fn smoothing_strengthens_shared_trend() {
    let coeffs = ComfortCoefficients {
        heart_rate: 0.0,
        solar: 0.0,
        noise: 0.0,
        altitude: 0.0,
        ..Default::default()
    };
    let mut ok = 0;
    for seed in 0..10 {
        // both series follow one trend, each with its own noise
        let trend = synth::trend_path(N, 0.0, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let vata: Vec<f64> = trend
            .iter()
            .map(|t| (t + 0.8 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).clamp(0.0, 5.0))
            .collect();
        let points = synth::generate_comfort_path(&trend, N, &coeffs, 1.0, seed + 100).unwrap();
        let fits = validation::fit_vata_comfort(&vata, &comfort(&points), &[0.5, 0.3, 0.1]).unwrap();
        let r: Vec<f64> = fits[1..].iter().map(|f| f.adjusted_r2).collect();
        eprintln!("seed {seed}: raw {:.3} {r:.3?}", fits[0].adjusted_r2);
        if r[0] <= r[1] && r[1] <= r[2] {
            ok += 1;
        }
    }
    assert!(ok >= 8, "non-decreasing in {ok}/10 seeds");
}

#[test]
fn vata_hsna_ranks_first() {
    let names = vata_core::interpretable_names();
    for seed in 0..10 {
        let w = walk(seed);
        let sets = validation::standard_sets(&w.points, &w.vata, names, &w.if_rows).unwrap();
        let table = validation::fit_multivariate(&sets, &comfort(&w.points)).unwrap();
        let summary: Vec<(String, f64)> = table.iter().map(|f| (f.name.clone(), f.adjusted_r2)).collect();
        assert_eq!(table[0].name, "VATA+HSNA", "seed {seed}: {summary:?}");
    }
}

#[test]
fn irrelevant_column_barely_moves_adjusted_r2() {
    for seed in 0..20 {
        let w = walk(seed);
        let c = comfort(&w.points);
        let base = PredictorSet {
            name: "VATA+HSNA".into(),
            blocks: vec![
                PredictorBlock::new("VATA", vec![("vata".into(), w.vata.clone())]),
                validation::hsna_block(&w.points),
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
        let mut extra = base.clone();
        extra.blocks.push(PredictorBlock::new("junk", vec![("junk".into(), white(N, &mut rng))]));
        let a = validation::fit_set(&base, &c).unwrap().adjusted_r2;
        let b = validation::fit_set(&extra, &c).unwrap().adjusted_r2;
        assert!(b - a <= 0.02, "seed {seed}: {a} -> {b}");
    }
}

#[test]
fn ranking_ignores_affine_rescaling() {
    let names = vata_core::interpretable_names();
    let w = walk(4);
    let c = comfort(&w.points);
    let before = validation::fit_multivariate(
        &validation::standard_sets(&w.points, &w.vata, names, &w.if_rows).unwrap(),
        &c,
    )
    .unwrap();
    let mut points = w.points.clone();
    for p in &mut points {
        p.solar = -3.0 * p.solar + 17.0;
    }
    let mut if_rows = w.if_rows.clone();
    for r in &mut if_rows {
        r[3] = 250.0 * r[3] - 4.0;
    }
    let vata: Vec<f64> = w.vata.iter().map(|v| 0.5 * v + 9.0).collect();
    let after =
        validation::fit_multivariate(&validation::standard_sets(&points, &vata, names, &if_rows).unwrap(), &c)
            .unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(a.name, b.name);
        assert!((a.adjusted_r2 - b.adjusted_r2).abs() < 1e-9, "{}: {} vs {}", a.name, a.adjusted_r2, b.adjusted_r2);
    }
}
