//! Expert-teacher-student reverse distillation for unsupervised anomaly
//! detection and localization.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
mod fused;
mod im2col;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scoring;
pub mod synthesis;
pub mod trainer;

pub use error::{Error, Result};
