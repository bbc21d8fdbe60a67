//! Vision transformers whose tokens are routed to nested experts.
//!
//! Tokens of an image are routed to nested sub-models of one shared
//! transformer: narrow experts read and write only a prefix of each token's
//! features, so cheap tokens cost a fraction of a full pass while attention
//! still mixes every token at full width.
//!
//! - [`tensor`], [`autograd`], [`gradcheck`]: dense tensors, a recording tape
//!   for reverse-mode gradients, and a finite-difference checker.
//! - [`nested`]: nested ViT blocks, parameters and forward passes.
//! - [`routing`]: router head, expert preferred routing, random routing and
//!   the capacity distribution solver.
//! - [`flops`]: multiply-accumulate accounting.
//! - [`harness`]: datasets, training, evaluation, sweeps and visualization.

pub mod autograd;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod harness;
pub mod nested;
pub mod routing;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
