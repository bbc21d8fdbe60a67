//! Desk-scale experiment plumbing: datasets, checkpoints, training,
//! evaluation, capacity sweeps and routing masks.
//!
//! Every random decision draws from a purpose-specific stream derived from
//! the run seed (see [`stream_seed`]), so changing e.g. the evaluation
//! router seed never perturbs initialization or batch order.

mod checkpoint;
mod data;
mod eval;
mod idx;
pub mod selftest;
mod train;
mod visualize;

pub use checkpoint::{Checkpoint, CheckpointMeta, DType};
pub use data::{synth_planted_patch, synth_planted_patch_with, Dataset, SynthOptions};
pub use eval::{
    capacity_sweep, eval_threads, evaluate, evaluate_granularity, Metrics, RouterKind, Sweep, SweepRow,
};
pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx};
pub use train::{
    dense_image_macs, mat_joint_pretrain, mone_finetune, CapacityMode, Schedule, TrainConfig, TrainLog,
};
pub use visualize::{parse_pgm, route_visualize, write_pgm, RouteMap};

/// Named RNG streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Sampling = 2,
    RandomRouter = 3,
    Data = 4,
    Augment = 5,
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of `stream` for run seed `seed`.
pub fn stream_seed(seed: u64, stream: Stream) -> u64 {
    mix64(mix64(seed) ^ (stream as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93))
}
