//! Action-unit guided attention alignment for interpretable facial
//! expression classifiers.
//!
//! The crate covers the full pipeline at desk scale: a small reverse-mode
//! autodiff engine ([`tensor`]), landmark-anchored action-unit maps ([`au`]),
//! a configurable CNN exposing layer-wise attention ([`model`]), post-hoc CAM
//! extractors ([`cam`]), joint classification/alignment training
//! ([`train`]), localization metrics ([`metrics`]) and a deterministic
//! synthetic face dataset ([`synth`]).

pub mod au;
pub mod cam;
pub mod config;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pnm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
