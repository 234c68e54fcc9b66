//! The interpretable-feature manifest.
//!
//! Raw feature files carry per-class segmentation shares, object counts,
//! pixel statistics and scene probabilities. The 52 interpretable features
//! used by the inference models and every report are derived from those raw
//! columns through the versioned manifest in `data/interpretable_features.v1.json`.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

const MANIFEST_JSON: &str = include_str!("../data/interpretable_features.v1.json");

pub const SEGMENTATION_COUNT: usize = 19;
pub const INTERPRETABLE_COUNT: usize = 52;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Segmentation,
    Objects,
    Pixel,
    Scene,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub block: Block,
    pub group: String,
    pub sources: Vec<String>,
    /// Set when the flat reconstruction of this entry involved a judgement call.
    pub ambiguity: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: String,
    description: String,
    segmentation_classes: Vec<String>,
    features: Vec<ManifestEntry>,
}

/// Parsed manifest plus the column layout derived from it.
#[derive(Debug)]
pub struct FeatureSchema {
    pub version: String,
    pub segmentation_classes: Vec<String>,
    pub object_columns: Vec<String>,
    pub pixel_columns: Vec<String>,
    pub scene_columns: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    interpretable_names: Vec<String>,
    // per interpretable entry: (block, indices into that block's raw vector)
    sources: Vec<(Block, Vec<usize>)>,
}

impl FeatureSchema {
    fn build() -> Self {
        let manifest: Manifest =
            serde_json::from_str(MANIFEST_JSON).expect("embedded feature manifest is valid JSON");
        assert_eq!(manifest.segmentation_classes.len(), SEGMENTATION_COUNT);
        assert_eq!(manifest.features.len(), INTERPRETABLE_COUNT);

        let columns_of = |block: Block| -> Vec<String> {
            manifest
                .features
                .iter()
                .filter(|e| e.block == block)
                .flat_map(|e| e.sources.iter().cloned())
                .collect()
        };
        let object_columns = columns_of(Block::Objects);
        let pixel_columns = columns_of(Block::Pixel);
        let scene_columns = columns_of(Block::Scene);

        let sources = manifest
            .features
            .iter()
            .map(|e| {
                let pool: &[String] = match e.block {
                    Block::Segmentation => &manifest.segmentation_classes,
                    Block::Objects => &object_columns,
                    Block::Pixel => &pixel_columns,
                    Block::Scene => &scene_columns,
                };
                let idx = e
                    .sources
                    .iter()
                    .map(|s| {
                        pool.iter()
                            .position(|p| p == s)
                            .unwrap_or_else(|| panic!("manifest source {s} not in block"))
                    })
                    .collect();
                (e.block, idx)
            })
            .collect();

        FeatureSchema {
            version: manifest.version,
            segmentation_classes: manifest.segmentation_classes,
            object_columns,
            pixel_columns,
            scene_columns,
            interpretable_names: manifest.features.iter().map(|e| e.name.clone()).collect(),
            entries: manifest.features,
            sources,
        }
    }

    /// The 52 interpretable feature names in manifest order.
    pub fn interpretable_names(&self) -> &[String] {
        &self.interpretable_names
    }

    /// Raw columns required in every features file, in canonical order.
    pub fn raw_columns(&self) -> impl Iterator<Item = &str> {
        self.segmentation_classes
            .iter()
            .chain(&self.object_columns)
            .chain(&self.pixel_columns)
            .chain(&self.scene_columns)
            .map(String::as_str)
    }

    pub(crate) fn derive_interpretable(
        &self,
        segmentation: &[f64],
        objects: &[f64],
        pixel: &[f64],
        scene: &[f64],
    ) -> Vec<f64> {
        self.sources
            .iter()
            .map(|(block, idx)| {
                let src = match block {
                    Block::Segmentation => segmentation,
                    Block::Objects => objects,
                    Block::Pixel => pixel,
                    Block::Scene => scene,
                };
                idx.iter().map(|&i| src[i]).sum()
            })
            .collect()
    }
}

pub fn schema() -> &'static FeatureSchema {
    static SCHEMA: OnceLock<FeatureSchema> = OnceLock::new();
    SCHEMA.get_or_init(FeatureSchema::build)
}

/// Shorthand for `schema().interpretable_names()`.
pub fn interpretable_names() -> &'static [String] {
    schema().interpretable_names()
}
