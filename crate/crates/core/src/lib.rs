//! Camera relocalization from object layout: detections in a single image
//! are organized into a relation graph whose pooled feature, fused with a
//! per-image context vector, regresses the camera pose directly.
//!
//! Module map:
//! - [`numerics`]: tensors, tape autodiff, layers, Adam, checkpoints
//! - [`geometry`]: quaternion/log-quaternion algebra, pose metrics, intrinsics
//! - [`org`]: detection filtering, k-NN graphs, graph layers, relation features
//! - [`synth`]: synthetic scenes, camera trajectories, rendered detections
//! - [`dataio`]: dataset manifest + frame records, tuple sampling
//! - [`model`]: pose regressor assembly, losses, training, evaluation
//! - [`config`]: run configuration with validated defaults

pub mod config;
pub mod dataio;
pub mod error;
pub mod geometry;
pub mod model;
pub mod numerics;
pub mod org;
pub mod synth;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, Pose};
pub use numerics::{Tape, Tensor};
pub use org::Detection;
