//! Pure building blocks for expert-teacher-student reverse distillation.
//!
//! Everything here works on plain `f32` buffers and needs only `alloc`:
//! channels-first images and single-channel grids, bilinear resampling,
//! Perlin-noise anomaly synthesis, anomaly-map aggregation with Gaussian
//! smoothing, and the evaluation metrics (AUROC, average precision and
//! per-region overlap). Tensor code, file formats and the command line live
//! in the `ets` crate.

#![no_std]

extern crate alloc;

mod error;
mod grid;

pub mod anomaly_map;
pub mod metrics;
pub mod perlin;
pub mod pro;
pub mod resize;
pub mod smooth;
pub mod synthesis;

pub use anomaly_map::{assemble_anomaly_map, AnomalyMap};
pub use error::{Error, Result};
pub use grid::{Grid, Image};
pub use metrics::{auroc, average_precision};
pub use pro::{label_regions, pro, pro_curve, RegionLabels};
pub use synthesis::{SynthesisParams, SyntheticSample, Texture};
