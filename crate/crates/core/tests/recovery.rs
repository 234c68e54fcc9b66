use vata_core::synth::{generate_population, simulate_comparisons, SynthConfig};
use vata_core::trueskill::{recovery_spearman, run_ranking, ScoringConfig};
use vata_core::Indicator;

fn recovery(seed: u64, beta: f64) -> f64 {
    recovery_at(seed, beta, 20)
}

fn recovery_at(seed: u64, beta: f64, per_image: usize) -> f64 {
    let pop = generate_population(&SynthConfig {
        n_images: 500,
        seed,
        ..Default::default()
    })
    .unwrap();
    let ids: Vec<String> = pop.latent.iter().map(|s| s.image_id.clone()).collect();
    let truth: Vec<f64> = pop.latent.iter().map(|s| s.vata).collect();
    let comps = simulate_comparisons(&pop.latent, Indicator::Vata, 500 * per_image / 2, beta, seed + 100).unwrap();
    let cfg = ScoringConfig {
        seed,
        ..Default::default()
    };
    let r = run_ranking(&comps, Indicator::Vata, &ids, &cfg).unwrap();
    recovery_spearman(&r.mean_mu, &truth)
}

#[test]
fn noise_free_recovery_over_five_seeds() {
    for seed in 0..5 {
        let rho = recovery(seed, 1e-6);
        assert!(rho >= 0.95, "seed {seed}: spearman {rho}");
    }
}

#[test]
fn noisy_recovery_over_five_seeds() {
    for seed in 0..5 {
        let rho = recovery(seed, 1.0);
        assert!(rho >= 0.80, "seed {seed}: spearman {rho}");
    }
}

#[test]
fn recovery_grows_with_comparisons_per_image() {
    for seed in 0..5 {
        let r: Vec<f64> = [5, 10, 20].iter().map(|&c| recovery_at(seed, 1.0, c)).collect();
        assert!(r[0] <= r[1] && r[1] <= r[2], "seed {seed}: {r:?}");
    }
}
