//! Street-level thermal-affordance scoring.
//!
//! The crate turns precomputed street-image features and pairwise survey
//! responses into 0-5 thermal-affordance (VATA) scores and fits the models
//! that explain and predict them:
//!
//! * [`trueskill`]: Bayesian pairwise rating of survey comparisons.
//! * [`sampling`]: k-means streetscape clustering, stratified survey sampling
//!   and sample-size diagnostics.
//! * [`enrm`]: elastic-net inference models (features → perceptual
//!   indicators → VATA).
//! * [`mtnnl`]: two-stage multi-task network for VATA prediction.
//! * [`validation`]: smoothing and regression against field comfort data.
//! * [`geomap`]: hexagonal aggregation and GeoJSON export.
//! * [`synth`]: a synthetic world with known ground truth for end-to-end checks.

pub mod data;
pub mod enrm;
pub mod error;
pub mod geomap;
pub mod indicator;
pub(crate) mod linalg;
pub mod mtnnl;
pub mod sampling;
pub mod schema;
pub mod stats;
pub mod synth;
pub mod trueskill;
pub mod validation;

pub use data::{
    ComfortPoint, FeatureTable, FeatureVector, ImageManifest, ImageRecord, IndicatorScores,
    ManifestImage, PairwiseComparison, Side,
};
pub use error::{Error, ErrorKind, Result};
pub use indicator::{Indicator, Vpi, INDICATOR_COUNT, VPI_COUNT};
pub use schema::{interpretable_names, INTERPRETABLE_COUNT};
pub use stats::RegressionReport;
