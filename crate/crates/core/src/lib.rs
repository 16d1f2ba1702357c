//! Speculative decoding engine with a GliDe-style draft model, speculation
//! trees, hybrid tree attention, and lossless verification.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: row-major matrices, seeded RNG streams, softmax/rmsnorm.
//! * [`positions`]: vanilla and anchor-offset position indices, RoPE.
//! * [`attention`]: cache/spec attention partials and their LSE merge.
//! * [`model`]: the target transformer, its KV cache, and file format.
//! * [`draft`]: the single-block draft with a sliding self-attention window
//!   and cross-attention into the target cache.
//! * [`tree`]: speculation trees, tree masks, dynamic beam expansion.
//! * [`verify`]: greedy and stochastic verification plus the decode loop.
//! * [`shift`]: the truncated-attention operator used for noisy training.
//! * [`oracle`]: slow 64-bit dense references used by tests and selftest.
//! * [`selftest`]: the runnable invariant suites behind `specdec selftest`.
//!
//! Everything is generic over [`Real`] (`f32` or `f64`); the same code path
//! serves the fast engine and the high-precision checks.

pub mod attention;
pub mod draft;
pub mod error;
pub mod model;
pub mod oracle;
pub mod positions;
pub mod selftest;
pub mod shift;
pub mod tensor;
pub mod testhooks;
pub mod tree;
pub mod verify;

pub use error::{Error, Result};
pub use model::{KVCache, ModelConfig, ModelWeights, SpecKv, Token};
pub use tensor::{Real, RngStream, Tensor2};
pub use tree::{SpeculationTree, TreeMask};
pub use verify::{
    decode_loop, DecodeMetrics, DecodeMode, DecodeOutput, DecodeParams, DraftPolicy, VerifyResult,
};
