//! Slow 64-bit reference implementations used by tests and selftest.
//!
//! Everything here recomputes what the engine computes, the dumb way: one
//! monolithic softmax per query over an explicit mask, no KV caches, no
//! sliding windows, no streaming merges, no blocking. The math helpers are
//! deliberately re-implemented with plain loops instead of calling into
//! `tensor`, so agreement with the engine is evidence rather than
//! tautology. The one exception is [`reference_beam_search`], which reuses
//! the engine's `draft_forward` on purpose: it certifies the *tree-growing
//! strategy* (no KV movement, halted nodes, global re-rank) against a
//! version that physically copies per-beam state, not the attention math.
//!
//! Oracles assert on malformed input instead of returning errors wherever
//! a caller could only hit the condition through a test bug.

use crate::draft::{draft_forward, DraftWeights, WindowCache};
use crate::error::{Error, Result};
use crate::model::{KVCache, ModelWeights, Token};
use crate::tensor::{Real, Tensor2};
use crate::tree::proposal_probs;

// ---------------------------------------------------------------------------
// Independent f64 math
// ---------------------------------------------------------------------------

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `x * W`, accumulating one output channel at a time (the engine sweeps
/// input channels in the outer loop, so even the summation order differs).
fn matvec64(x: &[f64], w: &Tensor2<f64>) -> Vec<f64> {
    assert_eq!(x.len(), w.rows(), "oracle matvec shape");
    (0..w.cols())
        .map(|j| {
            let mut acc = 0.0;
            for (k, &xk) in x.iter().enumerate() {
                acc += xk * w.get(k, j);
            }
            acc
        })
        .collect()
}

fn softmax64(xs: &[f64]) -> Vec<f64> {
    assert!(!xs.is_empty(), "oracle softmax over nothing");
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn rmsnorm64(x: &[f64], gain: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), gain.len(), "oracle rmsnorm shape");
    let ms = dot64(x, x) / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect()
}

fn silu64(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn rope64(x: &mut [f64], pos: usize, base: f64) {
    let d = x.len() as f64;
    for i in 0..x.len() / 2 {
        let angle = pos as f64 * base.powf(-2.0 * i as f64 / d);
        let (s, c) = angle.sin_cos();
        let (x0, x1) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = x0 * c - x1 * s;
        x[2 * i + 1] = x0 * s + x1 * c;
    }
}

/// One attention query over `n` flattened key/value rows restricted to the
/// indices where `pick` is true, scaled by `1/sqrt(d)`, as a single dense
/// softmax. `None` when nothing is picked.
fn attend64(q: &[f64], keys: &[f64], values: &[f64], pick: &[bool]) -> Option<Vec<f64>> {
    let d = q.len();
    assert_eq!(keys.len(), pick.len() * d, "oracle attend key shape");
    assert_eq!(values.len(), pick.len() * d, "oracle attend value shape");
    let scale = 1.0 / (d as f64).sqrt();
    let idx: Vec<usize> = (0..pick.len()).filter(|&j| pick[j]).collect();
    if idx.is_empty() {
        return None;
    }
    let scores: Vec<f64> = idx
        .iter()
        .map(|&j| dot64(q, &keys[j * d..(j + 1) * d]) * scale)
        .collect();
    let probs = softmax64(&scores);
    let mut out = vec![0.0; d];
    for (&j, &p) in idx.iter().zip(&probs) {
        for (o, &v) in out.iter_mut().zip(&values[j * d..(j + 1) * d]) {
            *o += p * v;
        }
    }
    Some(out)
}

// ---------------------------------------------------------------------------
// Masked and hybrid attention references
// ---------------------------------------------------------------------------

/// Dense masked attention: row `i` of the result attends exactly the keys
/// `j` with `mask[i][j]`, in one softmax. A fully masked row is `None`.
pub fn masked_attention_f64(
    queries: &Tensor2<f64>,
    keys: &Tensor2<f64>,
    values: &Tensor2<f64>,
    mask: &[Vec<bool>],
) -> Result<Vec<Option<Vec<f64>>>> {
    let n = queries.rows();
    if keys.rows() != n || values.rows() != n || mask.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "masked attention over {n} queries, {} keys, {} values, {} mask rows",
            keys.rows(),
            values.rows(),
            mask.len()
        )));
    }
    if keys.cols() != queries.cols() || values.cols() != queries.cols() {
        return Err(Error::ShapeMismatch("query/key/value widths differ".into()));
    }
    if mask.iter().any(|row| row.len() != n) {
        return Err(Error::ShapeMismatch("ragged attention mask".into()));
    }
    Ok((0..n)
        .map(|i| attend64(queries.row(i), keys.data(), values.data(), &mask[i]))
        .collect())
}

/// The hybrid cache+spec attention a single query performs, as one
/// monolithic softmax over the concatenation of every cache row and the
/// visible spec rows. `None` when the union is empty.
pub fn hybrid_attention_f64(
    q: &[f64],
    cache_k: &[f64],
    cache_v: &[f64],
    spec_k: &[f64],
    spec_v: &[f64],
    visible: &[bool],
    head_dim: usize,
) -> Option<Vec<f64>> {
    assert_eq!(q.len(), head_dim, "oracle hybrid query width");
    assert_eq!(cache_k.len(), cache_v.len());
    assert_eq!(spec_k.len(), visible.len() * head_dim);
    assert_eq!(spec_v.len(), visible.len() * head_dim);
    let n_cache = cache_k.len() / head_dim;
    let mut keys = cache_k.to_vec();
    keys.extend_from_slice(spec_k);
    let mut values = cache_v.to_vec();
    values.extend_from_slice(spec_v);
    let mut pick = vec![true; n_cache];
    pick.extend_from_slice(visible);
    attend64(q, &keys, &values, &pick)
}

// ---------------------------------------------------------------------------
// Naive target forward
// ---------------------------------------------------------------------------

/// Output of [`naive_forward_f64`]: logits for every input token plus the
/// roped keys and raw values, `keys[layer][head]` flattened in token order
/// (exactly what the engine's KV cache should end up holding).
pub struct NaiveForward {
    pub logits: Vec<Vec<f64>>,
    pub keys: Vec<Vec<Vec<f64>>>,
    pub values: Vec<Vec<Vec<f64>>>,
}

/// The full target forward, no cache, no batching tricks: every layer
/// materializes all roped Q/K and raw V rows, and every token runs one
/// dense causal softmax per head.
pub fn naive_forward_f64(w: &ModelWeights<f64>, tokens: &[Token], indices: &[usize]) -> NaiveForward {
    let config = &w.config;
    let n = tokens.len();
    assert!(n > 0, "oracle forward over nothing");
    assert_eq!(indices.len(), n, "one position per token");
    assert!(indices.windows(2).all(|p| p[0] < p[1]), "positions must increase");
    let (nh, hd) = (config.n_heads, config.head_dim);

    let mut hidden: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| {
            assert!((t as usize) < config.vocab_size, "token out of range");
            w.embedding.row(t as usize).to_vec()
        })
        .collect();
    let mut keys = Vec::with_capacity(config.n_layers);
    let mut values = Vec::with_capacity(config.n_layers);

    for layer in &w.layers {
        // Project and rope the whole sequence for this layer.
        let mut q_rows = vec![Vec::new(); nh];
        let mut k_rows = vec![Vec::new(); nh];
        let mut v_rows = vec![Vec::new(); nh];
        for (h_state, &pos) in hidden.iter().zip(indices) {
            let xn = rmsnorm64(h_state, &layer.attn_norm);
            let q = matvec64(&xn, &layer.wq);
            let k = matvec64(&xn, &layer.wk);
            let v = matvec64(&xn, &layer.wv);
            for h in 0..nh {
                let mut qh = q[h * hd..(h + 1) * hd].to_vec();
                let mut kh = k[h * hd..(h + 1) * hd].to_vec();
                rope64(&mut qh, pos, config.rope_base);
                rope64(&mut kh, pos, config.rope_base);
                q_rows[h].extend_from_slice(&qh);
                k_rows[h].extend_from_slice(&kh);
                v_rows[h].extend_from_slice(&v[h * hd..(h + 1) * hd]);
            }
        }
        // Causal attention + residual + FFN + residual, token by token.
        for t in 0..n {
            let mut attn = vec![0.0; config.dim];
            let causal: Vec<bool> = (0..n).map(|j| j <= t).collect();
            for h in 0..nh {
                let out = attend64(
                    &q_rows[h][t * hd..(t + 1) * hd],
                    &k_rows[h],
                    &v_rows[h],
                    &causal,
                )
                .expect("token sees itself");
                attn[h * hd..(h + 1) * hd].copy_from_slice(&out);
            }
            let proj = matvec64(&attn, &layer.wo);
            for (a, b) in hidden[t].iter_mut().zip(&proj) {
                *a += b;
            }
            let xn = rmsnorm64(&hidden[t], &layer.ffn_norm);
            let mid: Vec<f64> = matvec64(&xn, &layer.ffn_in).into_iter().map(silu64).collect();
            let f = matvec64(&mid, &layer.ffn_out);
            for (a, b) in hidden[t].iter_mut().zip(&f) {
                *a += b;
            }
        }
        keys.push(k_rows);
        values.push(v_rows);
    }

    let table = w.lm_head.as_ref().unwrap_or(&w.embedding);
    let logits = hidden
        .iter()
        .map(|h_state| {
            let hn = rmsnorm64(h_state, &w.final_norm);
            (0..config.vocab_size).map(|v| dot64(&hn, table.row(v))).collect()
        })
        .collect();
    NaiveForward { logits, keys, values }
}

// ---------------------------------------------------------------------------
// Naive draft forward
// ---------------------------------------------------------------------------

/// The draft block with *no* sliding window: self-attention over the whole
/// `(token, position)` sequence, cross-attention over the whole committed
/// cache, then FFN and the shared unembedding. Returns the last token's
/// logits. Valid as a reference whenever the engine's window has not yet
/// evicted anything.
pub fn naive_draft_forward_f64(
    draft: &DraftWeights<f64>,
    target: &ModelWeights<f64>,
    seq: &[(Token, usize)],
    cache: &KVCache<f64>,
    cross_layer: Option<usize>,
) -> Vec<f64> {
    let config = &target.config;
    let (nh, hd) = (config.n_heads, config.head_dim);
    assert!(!seq.is_empty(), "oracle draft forward over nothing");
    assert!(!cache.is_empty(), "draft requires target context");
    let cl = cross_layer.unwrap_or(config.n_layers - 1);
    assert!(cl < config.n_layers, "cross layer out of range");

    // Self K/V for every sequence token: these depend only on the token's
    // own embedding, so the whole history can be projected up front.
    let mut k_rows = vec![Vec::new(); nh];
    let mut v_rows = vec![Vec::new(); nh];
    for &(tok, pos) in seq {
        assert!((tok as usize) < config.vocab_size, "token out of range");
        let xn = rmsnorm64(target.embedding.row(tok as usize), &draft.self_norm);
        let k = matvec64(&xn, &draft.self_wk);
        let v = matvec64(&xn, &draft.self_wv);
        for h in 0..nh {
            let mut kh = k[h * hd..(h + 1) * hd].to_vec();
            rope64(&mut kh, pos, config.rope_base);
            k_rows[h].extend_from_slice(&kh);
            v_rows[h].extend_from_slice(&v[h * hd..(h + 1) * hd]);
        }
    }

    let (last_tok, last_pos) = *seq.last().expect("non-empty");
    let mut hstate = target.embedding.row(last_tok as usize).to_vec();

    // Self-attention over everything, current token included.
    let xn = rmsnorm64(&hstate, &draft.self_norm);
    let q = matvec64(&xn, &draft.self_wq);
    let all = vec![true; seq.len()];
    let mut attn = vec![0.0; config.dim];
    for h in 0..nh {
        let mut qh = q[h * hd..(h + 1) * hd].to_vec();
        rope64(&mut qh, last_pos, config.rope_base);
        let out = attend64(&qh, &k_rows[h], &v_rows[h], &all).expect("token sees itself");
        attn[h * hd..(h + 1) * hd].copy_from_slice(&out);
    }
    let self_out = matvec64(&attn, &draft.self_wo);
    for (a, b) in hstate.iter_mut().zip(&self_out) {
        *a += b;
    }

    // Cross-attention over the whole committed cache at `cl`, projected
    // row by row when the draft carries projection matrices.
    let xn = rmsnorm64(&hstate, &draft.cross_norm);
    let qc = matvec64(&xn, &draft.cross_wq);
    let n_ctx = cache.len();
    let all_ctx = vec![true; n_ctx];
    let mut cross = vec![0.0; config.dim];
    let projected = match (&draft.cross_wk, &draft.cross_wv) {
        (Some(wk), Some(wv)) => {
            let mut pk = vec![Vec::new(); nh];
            let mut pv = vec![Vec::new(); nh];
            for t in 0..n_ctx {
                let mut krow = Vec::with_capacity(nh * hd);
                let mut vrow = Vec::with_capacity(nh * hd);
                for h in 0..nh {
                    let (k, v) = cache.head(cl, h);
                    krow.extend_from_slice(&k[t * hd..(t + 1) * hd]);
                    vrow.extend_from_slice(&v[t * hd..(t + 1) * hd]);
                }
                let k = matvec64(&krow, wk);
                let v = matvec64(&vrow, wv);
                for h in 0..nh {
                    pk[h].extend_from_slice(&k[h * hd..(h + 1) * hd]);
                    pv[h].extend_from_slice(&v[h * hd..(h + 1) * hd]);
                }
            }
            Some((pk, pv))
        }
        _ => None,
    };
    for h in 0..nh {
        let mut qh = qc[h * hd..(h + 1) * hd].to_vec();
        if config.cross_rope_query {
            rope64(&mut qh, last_pos, config.rope_base);
        }
        let (ck, cv): (&[f64], &[f64]) = match &projected {
            Some((pk, pv)) => (&pk[h], &pv[h]),
            None => cache.head(cl, h),
        };
        let out = attend64(&qh, ck, cv, &all_ctx).expect("non-empty cache");
        cross[h * hd..(h + 1) * hd].copy_from_slice(&out);
    }
    let cross_out = matvec64(&cross, &draft.cross_wo);
    for (a, b) in hstate.iter_mut().zip(&cross_out) {
        *a += b;
    }

    // FFN.
    let xn = rmsnorm64(&hstate, &draft.ffn_norm);
    let mid: Vec<f64> = matvec64(&xn, &draft.ffn_in).into_iter().map(silu64).collect();
    let f = matvec64(&mid, &draft.ffn_out);
    for (a, b) in hstate.iter_mut().zip(&f) {
        *a += b;
    }

    // Shared unembedding.
    let hn = rmsnorm64(&hstate, &target.final_norm);
    let table = target.lm_head.as_ref().unwrap_or(&target.embedding);
    (0..config.vocab_size).map(|v| dot64(&hn, table.row(v))).collect()
}

// ---------------------------------------------------------------------------
// Cache-moving beam search reference
// ---------------------------------------------------------------------------

/// Kept beams per tree level, each in rank order as `(path tokens,
/// cumulative log-prob)`.
pub type RankedBeams = Vec<Vec<(Vec<Token>, f64)>>;

/// Greedy beam search that physically copies per-beam draft windows at
/// every level, the way an engine that gathers KV state would. Per level
/// it returns the kept beams in rank order as `(path tokens, cumulative
/// log-prob)`. Candidate ranking is cumulative log-prob descending, final
/// token ascending, then parent rank — the same total order the engine's
/// in-place tree builder uses, so a correct engine matches *exactly*, f64
/// cums included.
///
/// The parameter list mirrors `tree::draft_tree` one-for-one so call
/// sites line up side by side.
#[allow(clippy::too_many_arguments)]
pub fn reference_beam_search<T: Real>(
    draft: &DraftWeights<T>,
    target: &ModelWeights<T>,
    cache: &KVCache<T>,
    root_view: &WindowCache<T>,
    root_dist: &[T],
    root_pos: usize,
    beam_widths: &[usize],
    cross_layer: Option<usize>,
) -> Result<RankedBeams> {
    struct Beam<T: Real> {
        path: Vec<Token>,
        cum: f64,
        // Window state *before* the path's last token is consumed; the
        // token is consumed on a fresh copy at expansion time.
        view: WindowCache<T>,
    }
    assert!(beam_widths.iter().all(|&w| w > 0), "beam widths must be positive");

    let rank = |cands: &mut Vec<Beam<T>>, w: usize| {
        // Stable sort: ties after (cum, token) keep enumeration order,
        // which is parent-rank order by construction.
        cands.sort_by(|a, b| {
            b.cum
                .total_cmp(&a.cum)
                .then(a.path.last().cmp(&b.path.last()))
        });
        cands.truncate(w);
    };

    let mut levels = Vec::with_capacity(beam_widths.len());
    let mut beams: Vec<Beam<T>> = Vec::new();

    for (depth, &w) in beam_widths.iter().enumerate() {
        let mut cands: Vec<Beam<T>> = Vec::new();
        if depth == 0 {
            for (tok, &p) in root_dist.iter().enumerate() {
                cands.push(Beam {
                    path: vec![tok as Token],
                    cum: p.to_f64_lossy().ln(),
                    view: root_view.clone(),
                });
            }
        } else {
            for beam in &beams {
                let &last = beam.path.last().expect("paths are non-empty");
                let pos = root_pos + beam.path.len() - 1;
                let mut advanced = beam.view.clone();
                let logits =
                    draft_forward(draft, target, last, pos, &mut advanced, cache, cross_layer)?;
                let dist = proposal_probs(&logits, 0.0)?;
                for (tok, &p) in dist.iter().enumerate() {
                    let mut path = beam.path.clone();
                    path.push(tok as Token);
                    cands.push(Beam {
                        path,
                        cum: beam.cum + p.to_f64_lossy().ln(),
                        view: advanced.clone(),
                    });
                }
            }
        }
        rank(&mut cands, w);
        levels.push(cands.iter().map(|b| (b.path.clone(), b.cum)).collect());
        beams = cands;
    }
    Ok(levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngStream;

    #[test]
    fn attend64_restricts_to_picked_rows() {
        let q = vec![1.0, 0.0];
        let keys = vec![5.0, 0.0, -5.0, 0.0, 0.0, 0.0];
        let values = vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0];
        // Only row 2 visible: output is exactly its value row.
        let out = attend64(&q, &keys, &values, &[false, false, true]).unwrap();
        assert_eq!(out, vec![3.0, 30.0]);
        assert!(attend64(&q, &keys, &values, &[false, false, false]).is_none());
        // All visible: a convex combination dominated by the hot key.
        let out = attend64(&q, &keys, &values, &[true, true, true]).unwrap();
        assert!(out[0] > 1.0 && out[0] < 3.0);
    }

    #[test]
    fn masked_attention_checks_shapes() {
        let t = Tensor2::<f64>::zeros(2, 4);
        let short = Tensor2::<f64>::zeros(1, 4);
        let mask = vec![vec![true, false], vec![true, true]];
        assert!(masked_attention_f64(&t, &t, &t, &mask).is_ok());
        assert!(masked_attention_f64(&t, &short, &t, &mask).is_err());
        assert!(masked_attention_f64(&t, &t, &t, &mask[..1]).is_err());
        let ragged = vec![vec![true], vec![true, true]];
        assert!(masked_attention_f64(&t, &t, &t, &ragged).is_err());
    }

    #[test]
    fn hybrid_reduces_to_plain_softmax_with_no_spec_rows() {
        let mut rng = RngStream::new(7, "oracle-self");
        let d = 4;
        let q: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let ck: Vec<f64> = (0..3 * d).map(|_| rng.normal()).collect();
        let cv: Vec<f64> = (0..3 * d).map(|_| rng.normal()).collect();
        let hybrid = hybrid_attention_f64(&q, &ck, &cv, &[], &[], &[], d).unwrap();
        let plain = attend64(&q, &ck, &cv, &[true; 3]).unwrap();
        assert_eq!(hybrid, plain);
        assert!(hybrid_attention_f64(&q, &[], &[], &[], &[], &[], d).is_none());
    }

    #[test]
    fn softmax64_is_a_distribution() {
        let p = softmax64(&[1.0, 2.0, 3.0, -40.0]);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p[2] > p[1] && p[1] > p[0] && p[0] > p[3]);
    }
}
