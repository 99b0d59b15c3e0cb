//! Numerical foundation: tensors, reverse-mode autodiff, layers, Adam and
//! checkpointing. Everything is `f64`, row-major and single-threaded; all
//! randomness flows through explicitly seeded generators so that a run is
//! reproducible bit for bit.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod matmul;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, ParamRecord};
pub use layers::{affine_forward, dropout, Affine, BatchNorm, ForwardCtx};
pub use params::{Binding, Param, ParamIdx, ParamSet};
pub use tape::{NodeId, Reduce, Tape};
pub use tensor::Tensor;

/// Two rounds of SplitMix64: derives independent, reproducible seed streams
/// (per-epoch shuffles, per-frame filters) from one run seed.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for _ in 0..2 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}
