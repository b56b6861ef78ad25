//! Dynamic population mapping on synthetic city data.
//!
//! The library turns coarse, zone-aggregated population rasters into
//! fine-grained hourly population maps. The pipeline has two learned parts: a
//! stacked super-resolution CNN that performs the spatial disaggregation, and
//! a time-embedded LSTM that smooths the per-cell hourly series. Around them
//! sit a deterministic synthetic-city generator (stations, zones, PoIs,
//! ground-truth population), mass-conserving preprocessing (activation-ratio
//! correction, Voronoi rasterization, zone aggregation), classical pixelwise
//! baselines (lasso, decision tree, random forest, MLP) and an evaluation
//! harness (RMSE/NRMSE/Corr/MAE, day-based cross-validation, PoI ablations,
//! period segmentation, locality breakdowns).
//!
//! See the `examples/` directory for one runnable example per capability, and
//! the `popmap` binary for the config-driven pipeline front-end.

pub mod baselines;
pub mod citygen;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod spatial;
pub mod temporal;
pub mod tensor;
pub mod voronoi;

pub use error::{Error, Result};
