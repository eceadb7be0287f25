//! Representation learning for crowdsourced WiFi trajectories: radio-field
//! and mobility simulation, trajectory augmentation, two-stage Siamese
//! training, pseudo-labeling and endpoint localization.

pub mod augment;
pub mod config;
pub mod error;
mod io;
pub mod labeling;
pub mod localization;
pub mod model;
pub mod mobility;
pub mod neural;
pub mod pipeline;
pub mod radio_sim;
pub mod seed;
pub mod ssl;

pub use error::{Error, Result};
