//! The draft model: one decoder block that proposes tokens cheaply.
//!
//! Sequence memory is a fixed-capacity ring of self-attention KV entries
//! (the sliding window), so drafting cost and memory stay constant no
//! matter how long decoding runs. Long-range context comes in through
//! cross-attention over the target model's committed KV cache, which by
//! default is read verbatim (zero extra memory, keys already roped); an
//! optional learned projection of cache rows sits behind
//! `ModelConfig::cross_proj`. The draft has no embedding or unembedding of
//! its own; it borrows both from the target, so its head is the target's
//! head by construction.
//!
//! Block layout, residual at each step:
//! self-attention over the window, cross-attention into the cache, FFN,
//! then a final norm and the shared unembedding.

use std::collections::VecDeque;

use crate::attention::attend_cache;
use crate::error::{Error, Result};
use crate::model::{KVCache, ModelConfig, ModelWeights, Token};
use crate::positions::apply_rope;
use crate::tensor::{gauss_init, matvec, rmsnorm, silu, Real, RngStream, Tensor2};

#[derive(Debug, Clone)]
pub struct DraftWeights<T> {
    pub self_norm: Vec<T>,
    pub self_wq: Tensor2<T>,
    pub self_wk: Tensor2<T>,
    pub self_wv: Tensor2<T>,
    pub self_wo: Tensor2<T>,
    pub cross_norm: Vec<T>,
    pub cross_wq: Tensor2<T>,
    /// Present only in projected cross-attention mode.
    pub cross_wk: Option<Tensor2<T>>,
    pub cross_wv: Option<Tensor2<T>>,
    pub cross_wo: Tensor2<T>,
    pub ffn_norm: Vec<T>,
    pub ffn_in: Tensor2<T>,
    pub ffn_out: Tensor2<T>,
    pub final_norm: Vec<T>,
}

impl<T: Real> DraftWeights<T> {
    pub fn cast<U: Real>(&self) -> DraftWeights<U> {
        let cv = |v: &Vec<T>| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        DraftWeights {
            self_norm: cv(&self.self_norm),
            self_wq: self.self_wq.cast(),
            self_wk: self.self_wk.cast(),
            self_wv: self.self_wv.cast(),
            self_wo: self.self_wo.cast(),
            cross_norm: cv(&self.cross_norm),
            cross_wq: self.cross_wq.cast(),
            cross_wk: self.cross_wk.as_ref().map(|t| t.cast()),
            cross_wv: self.cross_wv.as_ref().map(|t| t.cast()),
            cross_wo: self.cross_wo.cast(),
            ffn_norm: cv(&self.ffn_norm),
            ffn_in: self.ffn_in.cast(),
            ffn_out: self.ffn_out.cast(),
            final_norm: cv(&self.final_norm),
        }
    }
}

/// Random draft init at scale 0.02, norm gains at one.
pub fn init_draft<T: Real>(config: &ModelConfig, rng: &mut RngStream) -> Result<DraftWeights<T>> {
    config.validate()?;
    let d = config.dim;
    let scale = 0.02;
    Ok(DraftWeights {
        self_norm: vec![T::one(); d],
        self_wq: gauss_init(rng, d, d, scale)?,
        self_wk: gauss_init(rng, d, d, scale)?,
        self_wv: gauss_init(rng, d, d, scale)?,
        self_wo: gauss_init(rng, d, d, scale)?,
        cross_norm: vec![T::one(); d],
        cross_wq: gauss_init(rng, d, d, scale)?,
        cross_wk: if config.cross_proj {
            Some(gauss_init(rng, d, d, scale)?)
        } else {
            None
        },
        cross_wv: if config.cross_proj {
            Some(gauss_init(rng, d, d, scale)?)
        } else {
            None
        },
        cross_wo: gauss_init(rng, d, d, scale)?,
        ffn_norm: vec![T::one(); d],
        ffn_in: gauss_init(rng, d, config.ffn_dim, scale)?,
        ffn_out: gauss_init(rng, config.ffn_dim, d, scale)?,
        final_norm: vec![T::one(); d],
    })
}

// ---------------------------------------------------------------------------
// Sliding window
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct WindowEntry<T> {
    /// Roped keys, all heads concatenated.
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub pos: usize,
}

/// Ring buffer of the draft's most recent self-attention KV entries.
/// Holds at most `window` entries; pushing into a full ring evicts the
/// oldest. Cloning a window is how tree drafting forks per-branch views.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowCache<T> {
    window: usize,
    entries: VecDeque<WindowEntry<T>>,
    pushed: usize,
}

impl<T: Real> WindowCache<T> {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidArg("window must be at least 1".into()));
        }
        Ok(WindowCache {
            window,
            entries: VecDeque::with_capacity(window),
            pushed: 0,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Entries currently held (at most the window size).
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Tokens pushed over the window's lifetime, evicted ones included.
    pub fn pushed(&self) -> usize {
        self.pushed
    }

    pub fn max_pos(&self) -> Option<usize> {
        self.entries.back().map(|e| e.pos)
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.pos).collect()
    }

    /// Ring capacity actually allocated; stays put under steady pushing.
    pub fn capacity(&self) -> usize {
        self.entries.capacity()
    }

    fn push(&mut self, e: WindowEntry<T>) {
        if self.entries.len() == self.window {
            self.entries.pop_front();
        }
        self.entries.push_back(e);
        self.pushed += 1;
    }
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

fn resolve_cross_layer(config: &ModelConfig, cross_layer: Option<usize>) -> Result<usize> {
    let l = cross_layer.unwrap_or(config.n_layers - 1);
    if l >= config.n_layers {
        return Err(Error::InvalidArg(format!(
            "cross layer {l} out of {} layers",
            config.n_layers
        )));
    }
    Ok(l)
}

fn check_ahead<T: Real>(wcache: &WindowCache<T>, pos: usize) -> Result<()> {
    if let Some(maxp) = wcache.max_pos() {
        if pos <= maxp {
            return Err(Error::InvalidArg(format!(
                "inconsistent window view: position {pos} not ahead of {maxp}"
            )));
        }
    }
    Ok(())
}

/// Self-attention K/V for one token, roped at its position. This is the
/// only computation needed to advance the window past an already verified
/// token, so catch-up after acceptance skips attention entirely.
fn self_kv<T: Real>(
    draft: &DraftWeights<T>,
    target: &ModelWeights<T>,
    token: Token,
    pos: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    let config = &target.config;
    let x = target.embed(token)?;
    let xn = rmsnorm(&x, &draft.self_norm)?;
    let mut k = matvec(&xn, &draft.self_wk);
    let v = matvec(&xn, &draft.self_wv);
    let rope = config.rope();
    let hd = config.head_dim;
    for h in 0..config.n_heads {
        apply_rope(&mut k[h * hd..(h + 1) * hd], pos, &rope);
    }
    Ok((k, v))
}

/// Advances the window past `token` without computing logits (KV only).
pub fn push_token<T: Real>(
    draft: &DraftWeights<T>,
    target: &ModelWeights<T>,
    token: Token,
    pos: usize,
    wcache: &mut WindowCache<T>,
) -> Result<()> {
    check_ahead(wcache, pos)?;
    let (k, v) = self_kv(draft, target, token, pos)?;
    wcache.push(WindowEntry { k, v, pos });
    Ok(())
}

/// One draft step: consume `token` at `pos` (pushing it into the window)
/// and return next-token logits. Cross-attention reads the committed
/// target cache at `cross_layer` (default: last layer); an empty target
/// cache is an error since the draft is meaningless without context.
pub fn draft_forward<T: Real>(
    draft: &DraftWeights<T>,
    target: &ModelWeights<T>,
    token: Token,
    pos: usize,
    wcache: &mut WindowCache<T>,
    cache: &KVCache<T>,
    cross_layer: Option<usize>,
) -> Result<Vec<T>> {
    let config = &target.config;
    if cache.is_empty() {
        return Err(Error::DraftNeedsContext);
    }
    let cl = resolve_cross_layer(config, cross_layer)?;
    check_ahead(wcache, pos)?;
    let (nh, hd) = (config.n_heads, config.head_dim);
    let rope = config.rope();

    let x = target.embed(token)?;

    // Self-attention over the window, current token included.
    let xn = rmsnorm(&x, &draft.self_norm)?;
    let mut q = matvec(&xn, &draft.self_wq);
    for h in 0..nh {
        apply_rope(&mut q[h * hd..(h + 1) * hd], pos, &rope);
    }
    let (k, v) = self_kv(draft, target, token, pos)?;
    wcache.push(WindowEntry { k, v, pos });

    let n_win = wcache.entries.len();
    let mut attn = vec![T::zero(); config.dim];
    let mut keys_h = Vec::with_capacity(n_win * hd);
    let mut vals_h = Vec::with_capacity(n_win * hd);
    for h in 0..nh {
        keys_h.clear();
        vals_h.clear();
        for e in &wcache.entries {
            keys_h.extend_from_slice(&e.k[h * hd..(h + 1) * hd]);
            vals_h.extend_from_slice(&e.v[h * hd..(h + 1) * hd]);
        }
        let part = attend_cache(&q[h * hd..(h + 1) * hd], &keys_h, &vals_h, hd)?;
        attn[h * hd..(h + 1) * hd].copy_from_slice(&part.out);
    }
    let mut hstate = x;
    let self_out = matvec(&attn, &draft.self_wo);
    for (a, b) in hstate.iter_mut().zip(&self_out) {
        *a += *b;
    }

    // Cross-attention into the target cache.
    let hn = rmsnorm(&hstate, &draft.cross_norm)?;
    let mut qc = matvec(&hn, &draft.cross_wq);
    if config.cross_rope_query {
        for h in 0..nh {
            apply_rope(&mut qc[h * hd..(h + 1) * hd], pos, &rope);
        }
    }
    let mut cross = vec![T::zero(); config.dim];
    let projected = match (&draft.cross_wk, &draft.cross_wv) {
        (Some(wk), Some(wv)) => Some(project_cache(cache, cl, wk, wv, nh, hd)),
        _ => None,
    };
    for h in 0..nh {
        let (ck, cv): (&[T], &[T]) = match &projected {
            Some((pk, pv)) => (&pk[h], &pv[h]),
            None => cache.head(cl, h),
        };
        let part = attend_cache(&qc[h * hd..(h + 1) * hd], ck, cv, hd)?;
        cross[h * hd..(h + 1) * hd].copy_from_slice(&part.out);
    }
    let cross_out = matvec(&cross, &draft.cross_wo);
    for (a, b) in hstate.iter_mut().zip(&cross_out) {
        *a += *b;
    }

    // FFN.
    let fn_in = rmsnorm(&hstate, &draft.ffn_norm)?;
    let mut mid = matvec(&fn_in, &draft.ffn_in);
    for m in mid.iter_mut() {
        *m = silu(*m);
    }
    let f = matvec(&mid, &draft.ffn_out);
    for (a, b) in hstate.iter_mut().zip(&f) {
        *a += *b;
    }

    // Shared unembedding.
    let hn = rmsnorm(&hstate, &draft.final_norm)?;
    Ok(target.unembed(&hn))
}

/// Learned projection of the whole cached layer, split back per head.
fn project_cache<T: Real>(
    cache: &KVCache<T>,
    layer: usize,
    wk: &Tensor2<T>,
    wv: &Tensor2<T>,
    nh: usize,
    hd: usize,
) -> (Vec<Vec<T>>, Vec<Vec<T>>) {
    let n = cache.len();
    let mut pk = vec![Vec::with_capacity(n * hd); nh];
    let mut pv = vec![Vec::with_capacity(n * hd); nh];
    let mut row = vec![T::zero(); nh * hd];
    for t in 0..n {
        for h in 0..nh {
            let (k, _) = cache.head(layer, h);
            row[h * hd..(h + 1) * hd].copy_from_slice(&k[t * hd..(t + 1) * hd]);
        }
        let p = matvec(&row, wk);
        for h in 0..nh {
            pk[h].extend_from_slice(&p[h * hd..(h + 1) * hd]);
        }
        for h in 0..nh {
            let (_, v) = cache.head(layer, h);
            row[h * hd..(h + 1) * hd].copy_from_slice(&v[t * hd..(t + 1) * hd]);
        }
        let p = matvec(&row, wv);
        for h in 0..nh {
            pv[h].extend_from_slice(&p[h * hd..(h + 1) * hd]);
        }
    }
    (pk, pv)
}

/// Drafts a whole frontier of `(token, position, window view)` nodes
/// against one shared target cache. Returns each node's logits and its
/// advanced window view, in input order.
pub fn draft_forward_batch<T: Real>(
    draft: &DraftWeights<T>,
    target: &ModelWeights<T>,
    frontier: &[(Token, usize, WindowCache<T>)],
    cache: &KVCache<T>,
    cross_layer: Option<usize>,
) -> Result<Vec<(Vec<T>, WindowCache<T>)>> {
    let mut out = Vec::with_capacity(frontier.len());
    for (token, pos, view) in frontier {
        let mut v = view.clone();
        let logits = draft_forward(draft, target, *token, *pos, &mut v, cache, cross_layer)?;
        out.push((logits, v));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, prefill, ModelConfig};
    use crate::positions::vanilla_indices;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            dim: 16,
            n_layers: 2,
            n_heads: 2,
            head_dim: 8,
            ffn_dim: 32,
            window_w: 8,
            gamma: 2,
            beam_widths: vec![2, 2],
            ..ModelConfig::default()
        }
    }

    fn setup(seed: u64) -> (ModelWeights<f32>, DraftWeights<f32>, KVCache<f32>) {
        let config = tiny_config();
        let mut rng = RngStream::new(seed, "weights");
        let target = init_model(&config, &mut rng).unwrap();
        let mut drng = RngStream::new(seed, "draft-weights");
        let draft = init_draft(&config, &mut drng).unwrap();
        let prompt = [1_u32, 5, 9, 2];
        let (_, cache) = prefill(&target, &prompt, &vanilla_indices(0, 4)).unwrap();
        (target, draft, cache)
    }

    #[test]
    fn window_evicts_oldest_and_stays_bounded() {
        let (target, draft, cache) = setup(1);
        let mut w = WindowCache::new(8).unwrap();
        
        for i in 0..32 {
            let tok = (i % 32) as u32;
            draft_forward(&draft, &target, tok, i, &mut w, &cache, None).unwrap();
        }
        let cap_after_fill = w.capacity();
        assert_eq!(w.len(), 8);
        assert_eq!(w.pushed(), 32);
        assert_eq!(w.positions(), (24..32).collect::<Vec<_>>());
        for i in 32..64 {
            push_token(&draft, &target, 0, i, &mut w).unwrap();
        }
        assert_eq!(w.len(), 8);
        assert_eq!(w.capacity(), cap_after_fill);
    }

    #[test]
    fn window_of_one_sees_only_the_current_token() {
        let (target, draft, cache) = setup(2);
        let mut a = WindowCache::new(1).unwrap();
        let mut b = WindowCache::new(1).unwrap();
        // Different histories...
        push_token(&draft, &target, 3, 0, &mut a).unwrap();
        push_token(&draft, &target, 29, 0, &mut b).unwrap();
        // ...same current token: identical logits.
        let la = draft_forward(&draft, &target, 7, 1, &mut a, &cache, None).unwrap();
        let lb = draft_forward(&draft, &target, 7, 1, &mut b, &cache, None).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn short_sequences_match_the_unwindowed_oracle() {
        let (target, draft, cache) = setup(3);
        let t64 = target.cast::<f64>();
        let d64 = draft.cast::<f64>();
        let c64 = cache.cast::<f64>();
        let seq: Vec<(Token, usize)> = vec![(4, 4), (9, 5), (31, 6), (0, 7), (12, 8), (3, 9)];

        // Engine, f32, window 8 (never evicts here).
        let mut w = WindowCache::new(8).unwrap();
        let mut last = Vec::new();
        for &(tok, pos) in &seq {
            last = draft_forward(&draft, &target, tok, pos, &mut w, &cache, None).unwrap();
        }
        let reference = crate::oracle::naive_draft_forward_f64(&d64, &t64, &seq, &c64, None);
        for (a, b) in last.iter().zip(&reference) {
            assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
        }

        // Engine, f64: tighter agreement.
        let mut w64 = WindowCache::new(8).unwrap();
        let mut last64 = Vec::new();
        for &(tok, pos) in &seq {
            last64 = draft_forward(&d64, &t64, tok, pos, &mut w64, &c64, None).unwrap();
        }
        for (a, b) in last64.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn batch_replays_sequential_forwards_exactly() {
        let (target, draft, cache) = setup(4);
        let mut base = WindowCache::new(8).unwrap();
        push_token(&draft, &target, 2, 0, &mut base).unwrap();
        push_token(&draft, &target, 6, 1, &mut base).unwrap();

        let mut v1 = base.clone();
        let l1 = draft_forward(&draft, &target, 10, 2, &mut v1, &cache, None).unwrap();
        let mut v2 = v1.clone();
        let l2 = draft_forward(&draft, &target, 11, 3, &mut v2, &cache, None).unwrap();

        let frontier = vec![(10, 2, base.clone()), (11, 3, v1.clone())];
        let out = draft_forward_batch(&draft, &target, &frontier, &cache, None).unwrap();
        assert_eq!(out[0].0, l1);
        assert_eq!(out[0].1, v1);
        assert_eq!(out[1].0, l2);
        assert_eq!(out[1].1, v2);
    }

    #[test]
    fn cloned_views_do_not_touch_their_base() {
        let (target, draft, cache) = setup(5);
        let mut base = WindowCache::new(4).unwrap();
        push_token(&draft, &target, 1, 0, &mut base).unwrap();
        let snapshot = base.clone();
        let mut view = base.clone();
        draft_forward(&draft, &target, 9, 1, &mut view, &cache, None).unwrap();
        assert_eq!(base, snapshot);
        assert_ne!(view, base);
    }

    #[test]
    fn empty_target_cache_is_an_error() {
        let (target, draft, _) = setup(6);
        let empty = KVCache::new(2, 2, 8);
        let mut w = WindowCache::new(4).unwrap();
        let err = draft_forward(&draft, &target, 1, 0, &mut w, &empty, None).unwrap_err();
        assert_eq!(err.to_string(), "draft requires target context");
    }

    #[test]
    fn stale_positions_are_rejected() {
        let (target, draft, cache) = setup(7);
        let mut w = WindowCache::new(4).unwrap();
        push_token(&draft, &target, 1, 5, &mut w).unwrap();
        let err = draft_forward(&draft, &target, 2, 5, &mut w, &cache, None).unwrap_err();
        assert!(err.to_string().contains("inconsistent window view"));
        assert!(push_token(&draft, &target, 2, 4, &mut w).is_err());
    }

    #[test]
    fn bad_cross_layer_is_rejected() {
        let (target, draft, cache) = setup(8);
        let mut w = WindowCache::new(4).unwrap();
        let err = draft_forward(&draft, &target, 1, 0, &mut w, &cache, Some(2)).unwrap_err();
        assert!(err.to_string().contains("cross layer"));
    }

    #[test]
    fn draft_head_is_the_target_unembedding() {
        let (target, draft, cache) = setup(9);
        let mut w = WindowCache::new(4).unwrap();
        let before = draft_forward(&draft, &target, 1, 0, &mut w.clone(), &cache, None).unwrap();

        // Perturb one unembedding row; only that token's logit may move.
        let mut bumped = target.clone();
        let row = bumped.embedding.row_mut(3);
        for x in row.iter_mut() {
            *x += 0.5;
        }
        // Keep the cache and the consumed token away from token 3 so the
        // perturbation can only enter through the shared head.
        let after = draft_forward(&draft, &bumped, 1, 0, &mut w, &cache, None).unwrap();
        for (i, (a, b)) in before.iter().zip(&after).enumerate() {
            if i == 3 {
                assert_ne!(a, b);
            } else {
                assert_eq!(a, b, "logit {i} moved");
            }
        }
    }

    #[test]
    fn projected_cross_attention_mode_runs_and_differs() {
        let mut config = tiny_config();
        config.cross_proj = true;
        let mut rng = RngStream::new(10, "weights");
        let target: ModelWeights<f32> = init_model(&config, &mut rng).unwrap();
        let mut drng = RngStream::new(10, "draft-weights");
        let draft = init_draft(&config, &mut drng).unwrap();
        assert!(draft.cross_wk.is_some());
        let (_, cache) = prefill(&target, &[1, 2, 3], &vanilla_indices(0, 3)).unwrap();
        let mut w = WindowCache::new(4).unwrap();
        let with_proj = draft_forward(&draft, &target, 5, 3, &mut w, &cache, None).unwrap();

        let mut plain = draft.clone();
        plain.cross_wk = None;
        plain.cross_wv = None;
        let mut w2 = WindowCache::new(4).unwrap();
        let without = draft_forward(&plain, &target, 5, 3, &mut w2, &cache, None).unwrap();
        assert_ne!(with_proj, without);
    }
}
