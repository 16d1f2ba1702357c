//! Hybrid tree attention.
//!
//! A speculative forward pass attends to two key/value populations: the
//! committed KV cache (visible to every query, no mask) and the in-flight
//! speculation tokens (visible along tree ancestry only). Rather than
//! concatenating them and masking one big score matrix, each part is
//! attended separately into an `(output, lse)` partial and the partials are
//! merged exactly in log-sum-exp space. The cache part never needs the tree
//! mask, the spec part never touches the long cache, and the merge is
//! algebraically equal to monolithic softmax attention over the union.
//!
//! The spec part additionally processes its keys in fixed-size blocks,
//! folding each block's partial into a running partial with the same merge.
//! Block size only changes rounding, never the result; tests pin the
//! blocked and unblocked paths together.

use crate::error::{Error, Result};
use crate::tensor::{softmax_lse, Real, Tensor2};
use crate::testhooks;
use crate::tree::TreeMask;

/// Spec-side keys are folded blockwise in chunks of this many rows.
pub const SPEC_BLOCK: usize = 16;

/// One attention partial: an output vector and the log-sum-exp of the
/// score logits that produced it. `lse == -inf` marks the empty partial
/// (no visible keys), which is the identity element of [`merge_attention`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttnPartial<T> {
    pub out: Vec<T>,
    pub lse: T,
}

impl<T: Real> AttnPartial<T> {
    pub fn empty(head_dim: usize) -> Self {
        AttnPartial {
            out: vec![T::zero(); head_dim],
            lse: T::neg_infinity(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lse == T::neg_infinity()
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Scaled-dot attention of one query over contiguous key/value rows with no
/// mask. Zero rows yield the empty partial.
pub fn attend_cache<T: Real>(
    q: &[T],
    keys: &[T],
    values: &[T],
    head_dim: usize,
) -> Result<AttnPartial<T>> {
    if q.len() != head_dim || !keys.len().is_multiple_of(head_dim) || keys.len() != values.len() {
        return Err(Error::ShapeMismatch(format!(
            "attend_cache q {} keys {} values {} head_dim {head_dim}",
            q.len(),
            keys.len(),
            values.len()
        )));
    }
    let n = keys.len() / head_dim;
    if n == 0 {
        return Ok(AttnPartial::empty(head_dim));
    }
    let scale = T::from_f64_lossy(1.0 / (head_dim as f64).sqrt());
    let mut logits = Vec::with_capacity(n);
    for j in 0..n {
        logits.push(dot(q, &keys[j * head_dim..(j + 1) * head_dim]) * scale);
    }
    let (probs, lse) = softmax_lse(&logits)?;
    let mut out = vec![T::zero(); head_dim];
    for (j, &p) in probs.iter().enumerate() {
        let v = &values[j * head_dim..(j + 1) * head_dim];
        for (o, &vv) in out.iter_mut().zip(v) {
            *o += p * vv;
        }
    }
    Ok(AttnPartial { out, lse })
}

/// Attention of one query over the spec tokens it is allowed to see,
/// folded blockwise. `visible[j]` gates spec token `j`. An all-false row
/// yields the empty partial.
pub fn attend_specs<T: Real>(
    q: &[T],
    spec_keys: &[T],
    spec_values: &[T],
    visible: &[bool],
    head_dim: usize,
) -> Result<AttnPartial<T>> {
    attend_specs_blocked(q, spec_keys, spec_values, visible, head_dim, SPEC_BLOCK)
}

/// Same as [`attend_specs`] with an explicit block size; `usize::MAX`
/// degenerates to a single unblocked softmax.
pub fn attend_specs_blocked<T: Real>(
    q: &[T],
    spec_keys: &[T],
    spec_values: &[T],
    visible: &[bool],
    head_dim: usize,
    block: usize,
) -> Result<AttnPartial<T>> {
    if q.len() != head_dim
        || !spec_keys.len().is_multiple_of(head_dim)
        || spec_keys.len() != spec_values.len()
    {
        return Err(Error::ShapeMismatch(format!(
            "attend_specs q {} keys {} values {} head_dim {head_dim}",
            q.len(),
            spec_keys.len(),
            spec_values.len()
        )));
    }
    let n = spec_keys.len() / head_dim;
    if visible.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "attend_specs visibility {} vs {} spec rows",
            visible.len(),
            n
        )));
    }
    if block == 0 {
        return Err(Error::InvalidArg("attend_specs block size 0".into()));
    }
    let scale = T::from_f64_lossy(1.0 / (head_dim as f64).sqrt());
    let mut acc = AttnPartial::empty(head_dim);
    let mut start = 0;
    while start < n {
        let end = (start + block).min(n);
        let mut logits = Vec::with_capacity(end - start);
        let mut rows = Vec::with_capacity(end - start);
        for j in start..end {
            if visible[j] {
                logits.push(dot(q, &spec_keys[j * head_dim..(j + 1) * head_dim]) * scale);
                rows.push(j);
            }
        }
        if !rows.is_empty() {
            let (probs, lse) = softmax_lse(&logits)?;
            let mut out = vec![T::zero(); head_dim];
            for (&j, &p) in rows.iter().zip(&probs) {
                let v = &spec_values[j * head_dim..(j + 1) * head_dim];
                for (o, &vv) in out.iter_mut().zip(v) {
                    *o += p * vv;
                }
            }
            acc = merge_attention(&acc, &AttnPartial { out, lse });
        }
        start = end;
    }
    Ok(acc)
}

/// Exact log-sum-exp merge of two attention partials. The empty partial is
/// the identity and merging is commutative and associative up to rounding.
pub fn merge_attention<T: Real>(a: &AttnPartial<T>, b: &AttnPartial<T>) -> AttnPartial<T> {
    debug_assert_eq!(a.out.len(), b.out.len());
    if a.is_empty() {
        return b.clone();
    }
    if b.is_empty() {
        return a.clone();
    }
    let m = if a.lse > b.lse { a.lse } else { b.lse };
    let wa = (a.lse - m).exp();
    let wb = (b.lse - m).exp();
    let denom = wa + wb;
    let lse = m + denom.ln();
    let mut out = Vec::with_capacity(a.out.len());
    for (&x, &y) in a.out.iter().zip(&b.out) {
        out.push((x * wa + y * wb) / denom);
    }
    if testhooks::merge_sabotaged() {
        if let Some(o) = out.first_mut() {
            *o += T::from_f64_lossy(1.0 / 1024.0);
        }
    }
    AttnPartial { out, lse }
}

/// Full hybrid pass for one head: every query row attends the whole cache
/// plus its visible spec tokens, and the two partials are merged. Query row
/// `i` corresponds to spec token `i`, so the mask must be square with one
/// row per query. A query with no cache and no visible spec tokens is an
/// error.
pub fn hybrid_tree_attention<T: Real>(
    queries: &Tensor2<T>,
    cache_keys: &[T],
    cache_values: &[T],
    spec_keys: &[T],
    spec_values: &[T],
    mask: &TreeMask,
    head_dim: usize,
) -> Result<Tensor2<T>> {
    if queries.cols() != head_dim || queries.rows() != mask.n() {
        return Err(Error::ShapeMismatch(format!(
            "hybrid attention: {} queries of width {}, mask for {}",
            queries.rows(),
            queries.cols(),
            mask.n()
        )));
    }
    let mut out = Tensor2::zeros(queries.rows(), head_dim);
    for i in 0..queries.rows() {
        let q = queries.row(i);
        let pc = attend_cache(q, cache_keys, cache_values, head_dim)?;
        let ps = attend_specs(q, spec_keys, spec_values, mask.row(i), head_dim)?;
        let merged = merge_attention(&pc, &ps);
        if merged.is_empty() {
            return Err(Error::QuerySeesNothing);
        }
        out.row_mut(i).copy_from_slice(&merged.out);
    }
    Ok(out)
}
