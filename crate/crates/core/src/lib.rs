//! Semantics-aware photo adjustment.
//!
//! A per-pixel color regression in CIELab whose output is a multiplicative
//! (low-rank bilinear) interaction between color features and scene-context
//! features. Context comes either from a multi-scale convolutional backbone
//! with a spatial RNN, or from a discrete map of `K` latent retouching
//! presets that is discovered during training and can be replaced by a
//! user-painted map at inference time.

pub mod adjustmap;
pub mod bilinear;
pub mod checkpoint;
pub mod colorspace;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod features;
pub mod losses;
pub mod model;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
