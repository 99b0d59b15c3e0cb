//! Shared fixtures for the pipeline benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use orgpose_core::config::RunConfig;
use orgpose_core::geometry::Pose;
use orgpose_core::model::{FrameInput, PoseModel};
use orgpose_core::Detection;

/// A batch of synthetic frames with `dets_per_frame` random detections
/// each, drawn from `categories` category ids on a VGA image.
pub fn random_frames(
    batch: usize,
    dets_per_frame: usize,
    categories: u32,
    seed: u64,
) -> Vec<FrameInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| FrameInput {
            detections: (0..dets_per_frame)
                .map(|_| Detection {
                    x: rng.random_range(0.0..640.0),
                    y: rng.random_range(0.0..480.0),
                    w: rng.random_range(10.0..200.0),
                    h: rng.random_range(10.0..200.0),
                    category: rng.random_range(0..categories),
                    confidence: rng.random::<f64>(),
                })
                .collect(),
            target: Pose::new(
                [
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(0.5..2.5),
                ],
                [
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ],
            ),
        })
        .collect()
}

/// The default-size model over a small category table.
pub fn default_model(categories: u32) -> PoseModel {
    let cfg = RunConfig::default();
    PoseModel::new(&cfg, categories as usize, (640.0, 480.0)).expect("valid default config")
}
