//! Continual test-time adaptation for dense per-pixel prediction.
//!
//! A mean-teacher loop adapts a small segmentation head online over a
//! stream of shifting synthetic domains. Pseudo labels are selected with
//! per-image, per-class confidence thresholds ([`icat`]) and the
//! consistency loss is weighted towards classes whose smoothed confidence
//! has dropped ([`icwl`]). Baselines, a synthetic benchmark and reporting
//! live alongside.

pub mod adapt;
pub mod augment;
pub mod config;
pub mod error;
pub mod experiment;
pub mod grids;
pub mod icat;
pub mod icwl;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod records;
pub mod report;
pub mod scenes;
pub mod svg;
pub mod verify;

pub use error::{Error, Result};
