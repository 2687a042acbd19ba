//! Pose estimation from a frame pair with learned discriminative motion
//! offsets, plus the tracking and action-recognition pipelines built on them.

pub mod action;
pub mod backbone;
pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod detection;
pub mod dimofs;
pub mod error;
pub mod finegrained;
pub mod experiment;
pub mod gradcheck;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod optim;
pub mod params;
pub mod sampling;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tracking;

pub use error::{Error, Result};
pub use sampling::RoiBox;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
