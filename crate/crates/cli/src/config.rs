use std::path::Path;

use serde::{Deserialize, Serialize};

use vata_core::enrm::EnrmConfig;
use vata_core::geomap::{BandThresholds, DEFAULT_EDGE_M};
use vata_core::mtnnl::NetworkConfig;
use vata_core::sampling::KMeansConfig;
use vata_core::synth::{ComfortCoefficients, SynthConfig};
use vata_core::trueskill::ScoringConfig;
use vata_core::{Error, Result};

/// Pipeline configuration. `seed` is mandatory and is copied into every
/// stage, replacing any per-section seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Config {
    pub seed: u64,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub cluster: KMeansConfig,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub score: ScoringConfig,
    #[serde(default)]
    pub enrm: EnrmConfig,
    #[serde(default)]
    pub mtnnl: MtnnlSection,
    #[serde(default)]
    pub validate: ValidateSection,
    #[serde(default)]
    pub map: MapSection,
    #[serde(default)]
    pub serve: ServeSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub population: SynthConfig,
    pub pairs_per_indicator: usize,
    pub comfort_points: usize,
    pub comfort_noise_sd: f64,
    /// Noise on the VATA trend the simulated walk follows.
    pub trend_noise_sd: f64,
    pub comfort: ComfortCoefficients,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            population: SynthConfig {
                n_images: 2000,
                ..Default::default()
            },
            pairs_per_indicator: 3168,
            comfort_points: 43,
            comfort_noise_sd: 0.3,
            trend_noise_sd: 0.3,
            comfort: ComfortCoefficients::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleSection {
    pub n_per_class: usize,
    pub grid_bins: usize,
    pub url_prefix: String,
    /// Nested sample sizes for the score convergence check.
    pub convergence_sizes: Vec<usize>,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            n_per_class: 100,
            grid_bins: 10,
            url_prefix: "/images/".into(),
            convergence_sizes: vec![100, 200, 300, 400, 500],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MtnnlSection {
    pub network: NetworkConfig,
    pub use_embedding: bool,
    pub ratios: (f64, f64, f64),
    /// 0 skips k-fold evaluation.
    pub folds: usize,
}

impl Default for MtnnlSection {
    fn default() -> Self {
        MtnnlSection {
            network: NetworkConfig::default(),
            use_embedding: true,
            ratios: (0.6, 0.2, 0.2),
            folds: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidateSection {
    pub alphas: Vec<f64>,
}

impl Default for ValidateSection {
    fn default() -> Self {
        ValidateSection {
            alphas: vec![0.5, 0.3, 0.1],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MapSection {
    pub edge_m: f64,
    pub thresholds: BandThresholds,
}

impl Default for MapSection {
    fn default() -> Self {
        MapSection {
            edge_m: DEFAULT_EDGE_M,
            thresholds: BandThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeSection {
    pub port: u16,
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection { port: 8080 }
    }
}

impl Config {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Config =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        if let Some(s) = seed_override {
            cfg.seed = s;
        }
        cfg.apply_seed();
        Ok(cfg)
    }

    fn apply_seed(&mut self) {
        let s = self.seed;
        self.synth.population.seed = s;
        self.cluster.seed = s;
        self.score.seed = s;
        self.enrm.seed = s;
        self.mtnnl.network.seed = s;
    }
}
