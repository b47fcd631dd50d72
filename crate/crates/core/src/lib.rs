//! Noise-robust feature-geometry training and input-curvature analysis for
//! small softmax classifiers.
//!
//! The crate is organised bottom-up: [`diffcore`] provides tensors and
//! reverse-mode gradients, [`model`] the MLP classifier, [`losses`] and
//! [`centroids`] the training objective, [`perturb`] and [`data`] the inputs,
//! and [`curvature`] and [`theory`] the numeric checks on trained models.

pub mod centroids;
pub mod curvature;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod losses;
pub mod model;
pub mod perturb;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
