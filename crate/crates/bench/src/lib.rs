//! Shared inputs for the criterion benches.

use vata_core::synth::{self, Population, SynthConfig};
use vata_core::{Indicator, PairwiseComparison};

pub fn population(n_images: usize, seed: u64) -> Population {
    synth::generate_population(&SynthConfig {
        n_images,
        seed,
        ..Default::default()
    })
    .expect("synthetic population")
}

/// Population ids plus `per_image` simulated VATA comparisons per image.
pub fn comparisons(pop: &Population, per_image: usize, seed: u64) -> (Vec<String>, Vec<PairwiseComparison>) {
    let ids = pop.latent.iter().map(|s| s.image_id.clone()).collect();
    let n = pop.latent.len() * per_image / 2;
    let comps = synth::simulate_comparisons(&pop.latent, Indicator::Vata, n, 1.0, seed).expect("comparisons");
    (ids, comps)
}

pub fn interpretable_rows(pop: &Population) -> Vec<Vec<f64>> {
    pop.features.iter().map(|f| f.interpretable().to_vec()).collect()
}

pub fn segmentation_rows(pop: &Population) -> Vec<Vec<f64>> {
    pop.features.iter().map(|f| f.segmentation.clone()).collect()
}
