//! Position index schemes and rotary embeddings.
//!
//! Long-context training uses anchor-offset indices: a handful of anchor
//! positions at the start (attention sinks) followed by a contiguous run at
//! a large offset, so short training windows rehearse long-range rotary
//! angles. Decoding appends contiguously after whatever scheme the prompt
//! used. Rotary trig is evaluated in f64 regardless of engine precision;
//! f32 argument reduction at positions in the tens of thousands would cost
//! more accuracy than the engine tolerances allow.

use crate::error::{Error, Result};
use crate::tensor::{Real, RngStream};

/// Per-token absolute position indices.
pub type PositionIndices = Vec<usize>;

/// Rotary embedding parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeParams {
    pub head_dim: usize,
    pub base: f64,
}

impl RopeParams {
    pub fn new(head_dim: usize, base: f64) -> Self {
        RopeParams { head_dim, base }
    }
}

/// Contiguous indices `[start, start + len)`.
pub fn vanilla_indices(start: usize, len: usize) -> PositionIndices {
    (start..start + len).collect()
}

/// Anchor-offset indices: `num_anchors` positions `0..num_anchors`, then a
/// contiguous run starting at `offset`. `offset` must clear the anchors.
pub fn anchor_offset_indices(
    len: usize,
    offset: usize,
    num_anchors: usize,
) -> Result<PositionIndices> {
    if offset < num_anchors {
        return Err(Error::OffsetCollidesAnchors);
    }
    let mut out = Vec::with_capacity(len);
    for i in 0..len.min(num_anchors) {
        out.push(i);
    }
    for i in 0..len.saturating_sub(num_anchors) {
        out.push(offset + i);
    }
    Ok(out)
}

/// Uniform offset in `[num_anchors, max_offset]`, drawn from the stream.
pub fn sample_offset(
    rng: &mut RngStream,
    num_anchors: usize,
    max_offset: usize,
) -> Result<usize> {
    if max_offset < num_anchors {
        return Err(Error::InvalidArg(format!(
            "max_offset {max_offset} below num_anchors {num_anchors}"
        )));
    }
    Ok(rng.uniform_incl(num_anchors as u64, max_offset as u64) as usize)
}

/// Rotates adjacent pairs of `x` by the position-dependent angles
/// `pos * base^(-2i/head_dim)`. Trig and the rotation itself run in f64.
pub fn apply_rope<T: Real>(x: &mut [T], pos: usize, params: &RopeParams) {
    debug_assert_eq!(x.len(), params.head_dim);
    debug_assert_eq!(params.head_dim % 2, 0, "rope needs an even head_dim");
    let d = params.head_dim as f64;
    for i in 0..params.head_dim / 2 {
        let freq = params.base.powf(-2.0 * i as f64 / d);
        let angle = pos as f64 * freq;
        let (s, c) = angle.sin_cos();
        let x0 = x[2 * i].to_f64_lossy();
        let x1 = x[2 * i + 1].to_f64_lossy();
        x[2 * i] = T::from_f64_lossy(x0 * c - x1 * s);
        x[2 * i + 1] = T::from_f64_lossy(x0 * s + x1 * c);
    }
}
