//! Shifted attention: each query at position `t` attends only keys at
//! positions `t' <= t - shift`.
//!
//! The banded mask never has to be materialized. Dropping the first
//! `shift` queries and the last `shift` keys re-indexes the band into an
//! ordinary causal triangle: truncated query row `i` is global query
//! `i + shift`, truncated key row `i'` is global key `i'`, and causal
//! `i' <= i` is exactly `t' <= t - shift`. The kernel therefore runs as a
//! plain streaming causal pass over the truncated operands, folding fixed
//! key blocks with the same online-softmax merge the tree kernel uses.
//! [`banded_mask_oracle`] spells out the mask for equivalence tests.

use crate::attention::{attend_cache, merge_attention, AttnPartial, SPEC_BLOCK};
use crate::error::{Error, Result};
use crate::tensor::{Real, RngStream, Tensor2};

/// A sequence length and a key shift, validated to `1 <= shift < len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftSpec {
    pub len: usize,
    pub shift: usize,
}

impl ShiftSpec {
    pub fn new(len: usize, shift: usize) -> Result<Self> {
        if shift == 0 || shift >= len {
            return Err(Error::InvalidArg(format!(
                "shift must satisfy 1 <= shift < len, got shift {shift} for len {len}"
            )));
        }
        Ok(ShiftSpec { len, shift })
    }

    /// Number of queries that see at least one key.
    pub fn query_rows(&self) -> usize {
        self.len - self.shift
    }
}

/// Uniform shift in `1..gamma` for a length-`len` sequence, drawn from the
/// stream conventionally named "noisy-shift". The shift emulates how far
/// the drafter's view of the cache lags during speculation, so it is
/// bounded by the speculation depth, and `len >= gamma` keeps every
/// drawable shift valid.
pub fn sample_shift(rng: &mut RngStream, gamma: usize, len: usize) -> Result<ShiftSpec> {
    if gamma < 2 {
        return Err(Error::InvalidArg(format!(
            "need gamma >= 2 to sample a shift in [1, gamma), got {gamma}"
        )));
    }
    if len < gamma {
        return Err(Error::InvalidArg(format!(
            "need len >= gamma so every shift is valid, got len {len} gamma {gamma}"
        )));
    }
    let shift = rng.uniform_incl(1, gamma as u64 - 1) as usize;
    ShiftSpec::new(len, shift)
}

/// The explicit band: `allow[t][t']` is true iff `t' + shift <= t`. Rows
/// below `shift` see nothing.
pub fn banded_mask_oracle(len: usize, shift: usize) -> Vec<Vec<bool>> {
    (0..len)
        .map(|t| (0..len).map(|tp| tp + shift <= t).collect())
        .collect()
}

/// Shifted attention over per-head matrices (`len x head_dim` each).
/// Returns `len - shift` output rows; row `i` belongs to global query
/// `i + shift`. Queries that see no key (global `t < shift`) have no row.
pub fn shifted_attention<T: Real>(
    queries: &Tensor2<T>,
    keys: &Tensor2<T>,
    values: &Tensor2<T>,
    shift: usize,
) -> Result<Tensor2<T>> {
    let l = queries.rows();
    let d = queries.cols();
    if keys.rows() != l || values.rows() != l || keys.cols() != d || values.cols() != d {
        return Err(Error::ShapeMismatch(format!(
            "shifted_attention queries {}x{} keys {}x{} values {}x{}",
            l,
            d,
            keys.rows(),
            keys.cols(),
            values.rows(),
            values.cols()
        )));
    }
    ShiftSpec::new(l, shift)?;

    let kept = l - shift;
    let mut out = Tensor2::zeros(kept, d);
    for i in 0..kept {
        let q = queries.row(i + shift);
        // Causal prefix in truncated coordinates: keys 0..=i, streamed
        // block by block.
        let limit = i + 1;
        let mut acc = AttnPartial::empty(d);
        let mut start = 0;
        while start < limit {
            let end = (start + SPEC_BLOCK).min(limit);
            let part = attend_cache(
                q,
                &keys.data()[start * d..end * d],
                &values.data()[start * d..end * d],
                d,
            )?;
            acc = merge_attention(&acc, &part);
            start = end;
        }
        out.row_mut(i).copy_from_slice(&acc.out);
    }
    Ok(out)
}
