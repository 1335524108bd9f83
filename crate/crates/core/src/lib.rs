//! Pose-induced video transformer training at desk scale.

pub mod ablation;
pub mod backbone;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod heads;
pub mod nn;
pub mod optim;
pub mod provider;
pub mod sim2d;
pub mod sim3d;
pub mod skelmap;
pub mod store;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
