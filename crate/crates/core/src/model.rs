//! The target transformer: a small pre-norm decoder with rotary positions,
//! a growable KV cache, a batched prefill path, and the speculative forward
//! pass that scores a whole token tree in one call via hybrid attention.
//!
//! Two deliberately distinct code paths produce logits: [`prefill`] runs
//! plain causal attention over a contiguous batch, while [`forward_spec`]
//! splits cache and spec attention and merges partials. Tests pin the two
//! against each other and against a dense 64-bit reference.
//!
//! Model files are a single binary blob: an 8-byte little-endian header
//! length, a JSON header (config plus tensor manifest), then raw f32
//! tensor data in manifest order. Draft tensors live in the same file
//! under `draft.` names.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::hybrid_tree_attention;
use crate::draft::DraftWeights;
use crate::error::{Error, Result};
use crate::positions::{apply_rope, RopeParams};
use crate::tensor::{gauss_init, matvec, rmsnorm, silu, Real, RngStream, Tensor2};
use crate::tree::TreeMask;

pub type Token = u32;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Hyperparameters shared by the target model, the draft block, and the
/// decode loop. Serialized verbatim into the model file header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub rope_base: f64,
    /// Draft self-attention window (ring capacity), in tokens.
    pub window_w: usize,
    /// Speculation depth: tree levels drafted per target forward.
    pub gamma: usize,
    /// Per-level beam widths; must have exactly `gamma` entries.
    pub beam_widths: Vec<usize>,
    /// Share the unembedding with the embedding matrix.
    pub tie_lm_head: bool,
    /// Project target KV before draft cross-attention instead of reading
    /// the cache verbatim.
    pub cross_proj: bool,
    /// Apply rotary embedding to the draft cross-attention query at its
    /// own position (cache keys are already roped in place).
    pub cross_rope_query: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            dim: 64,
            n_layers: 4,
            n_heads: 4,
            head_dim: 16,
            ffn_dim: 256,
            rope_base: 10_000.0,
            window_w: 512,
            gamma: 5,
            beam_widths: vec![4, 16, 16, 16, 16],
            tie_lm_head: true,
            cross_proj: false,
            cross_rope_query: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArg(msg));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.dim == 0 || self.n_layers == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return bad("dim, n_layers, n_heads, ffn_dim must be positive".into());
        }
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return bad(format!("head_dim must be even and positive, got {}", self.head_dim));
        }
        if self.n_heads * self.head_dim != self.dim {
            return bad(format!(
                "n_heads {} * head_dim {} != dim {}",
                self.n_heads, self.head_dim, self.dim
            ));
        }
        if self.rope_base <= 1.0 || !self.rope_base.is_finite() {
            return bad(format!("rope_base must be finite and > 1, got {}", self.rope_base));
        }
        if self.window_w == 0 {
            return bad("window_w must be at least 1".into());
        }
        if self.gamma == 0 {
            return bad("gamma must be at least 1".into());
        }
        if self.beam_widths.len() != self.gamma {
            return bad(format!(
                "beam_widths has {} entries but gamma is {}",
                self.beam_widths.len(),
                self.gamma
            ));
        }
        if self.beam_widths.contains(&0) {
            return bad("beam widths must be positive".into());
        }
        Ok(())
    }

    pub fn rope(&self) -> RopeParams {
        RopeParams::new(self.head_dim, self.rope_base)
    }
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerWeights<T> {
    pub attn_norm: Vec<T>,
    pub wq: Tensor2<T>,
    pub wk: Tensor2<T>,
    pub wv: Tensor2<T>,
    pub wo: Tensor2<T>,
    pub ffn_norm: Vec<T>,
    pub ffn_in: Tensor2<T>,
    pub ffn_out: Tensor2<T>,
}

#[derive(Debug, Clone)]
pub struct ModelWeights<T> {
    pub config: ModelConfig,
    pub embedding: Tensor2<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
    /// Untied unembedding; `None` means logits read the embedding rows.
    pub lm_head: Option<Tensor2<T>>,
}

impl<T: Real> ModelWeights<T> {
    pub fn embed(&self, token: Token) -> Result<Vec<T>> {
        if token as usize >= self.config.vocab_size {
            return Err(Error::TokenOutOfRange(token, self.config.vocab_size));
        }
        Ok(self.embedding.row(token as usize).to_vec())
    }

    /// Logits from an already final-normalized hidden state.
    pub fn unembed(&self, h: &[T]) -> Vec<T> {
        let table = self.lm_head.as_ref().unwrap_or(&self.embedding);
        let mut out = Vec::with_capacity(self.config.vocab_size);
        for v in 0..self.config.vocab_size {
            let row = table.row(v);
            let mut acc = T::zero();
            for (&a, &b) in h.iter().zip(row) {
                acc += a * b;
            }
            out.push(acc);
        }
        out
    }

    /// Final norm plus unembedding.
    pub fn logits(&self, h: &[T]) -> Result<Vec<T>> {
        Ok(self.unembed(&rmsnorm(h, &self.final_norm)?))
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        let cast_vec = |v: &Vec<T>| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        ModelWeights {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: cast_vec(&l.attn_norm),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ffn_norm: cast_vec(&l.ffn_norm),
                    ffn_in: l.ffn_in.cast(),
                    ffn_out: l.ffn_out.cast(),
                })
                .collect(),
            final_norm: cast_vec(&self.final_norm),
            lm_head: self.lm_head.as_ref().map(|t| t.cast()),
        }
    }
}

/// Random init. Residual-branch output matrices are drawn at
/// `base_scale / sqrt(n_layers)`, everything else at `base_scale`. Norm
/// gains start at one. A `base_scale` of exactly zero is a debug mode that
/// zeroes every projection (token probabilities become uniform).
pub fn init_model_scaled<T: Real>(
    config: &ModelConfig,
    rng: &mut RngStream,
    base_scale: f64,
) -> Result<ModelWeights<T>> {
    config.validate()?;
    if base_scale < 0.0 || !base_scale.is_finite() {
        return Err(Error::InvalidArg(format!("init scale must be >= 0, got {base_scale}")));
    }
    let d = config.dim;
    let mut draw = |rows: usize, cols: usize, scale: f64| -> Result<Tensor2<T>> {
        if base_scale == 0.0 {
            Ok(Tensor2::zeros(rows, cols))
        } else {
            gauss_init(rng, rows, cols, scale)
        }
    };
    let res_scale = base_scale / (config.n_layers as f64).sqrt();
    let embedding = draw(config.vocab_size, d, base_scale)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            attn_norm: vec![T::one(); d],
            wq: draw(d, d, base_scale)?,
            wk: draw(d, d, base_scale)?,
            wv: draw(d, d, base_scale)?,
            wo: draw(d, d, res_scale)?,
            ffn_norm: vec![T::one(); d],
            ffn_in: draw(d, config.ffn_dim, base_scale)?,
            ffn_out: draw(config.ffn_dim, d, res_scale)?,
        });
    }
    let lm_head = if config.tie_lm_head {
        None
    } else {
        Some(draw(config.vocab_size, d, base_scale)?)
    };
    Ok(ModelWeights {
        config: config.clone(),
        embedding,
        layers,
        final_norm: vec![T::one(); d],
        lm_head,
    })
}

/// Random init at the standard scale (0.02).
pub fn init_model<T: Real>(config: &ModelConfig, rng: &mut RngStream) -> Result<ModelWeights<T>> {
    init_model_scaled(config, rng, 0.02)
}

// ---------------------------------------------------------------------------
// KV cache
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct HeadKv<T> {
    pub k: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct LayerKv<T> {
    pub heads: Vec<HeadKv<T>>,
}

/// Committed per-layer, per-head KV rows plus the position of every
/// committed token. Rows only ever append.
#[derive(Debug, Clone)]
pub struct KVCache<T> {
    pub layers: Vec<LayerKv<T>>,
    pub positions: Vec<usize>,
    head_dim: usize,
}

impl<T: Real> KVCache<T> {
    pub fn new(n_layers: usize, n_heads: usize, head_dim: usize) -> Self {
        KVCache {
            layers: (0..n_layers)
                .map(|_| LayerKv {
                    heads: vec![HeadKv::default(); n_heads],
                })
                .collect(),
            positions: Vec::new(),
            head_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Position the next committed token will occupy.
    pub fn next_position(&self) -> usize {
        self.positions.last().map_or(0, |p| p + 1)
    }

    pub fn head(&self, layer: usize, head: usize) -> (&[T], &[T]) {
        let h = &self.layers[layer].heads[head];
        (&h.k, &h.v)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    fn push_row(&mut self, layer: usize, head: usize, k: &[T], v: &[T]) {
        let h = &mut self.layers[layer].heads[head];
        h.k.extend_from_slice(k);
        h.v.extend_from_slice(v);
    }

    pub fn cast<U: Real>(&self) -> KVCache<U> {
        KVCache {
            layers: self
                .layers
                .iter()
                .map(|l| LayerKv {
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadKv {
                            k: h.k.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect(),
                            v: h.v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect(),
                        })
                        .collect(),
                })
                .collect(),
            positions: self.positions.clone(),
            head_dim: self.head_dim,
        }
    }
}

/// KV rows produced by one speculative forward, held aside until
/// verification decides which of them to commit. Also remembers each spec
/// token's in-batch visibility so commits can check chain shape.
#[derive(Debug, Clone)]
pub struct SpecKv<T> {
    pub layers: Vec<LayerKv<T>>,
    pub positions: Vec<usize>,
    pub visible: Vec<Vec<usize>>,
    head_dim: usize,
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

struct Projected<T> {
    // Per head: n_tokens rows of head_dim, flattened.
    q: Vec<Vec<T>>,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

/// Q/K/V projection for a batch of normalized rows, with rotary applied to
/// q and k at each row's position index.
fn project_qkv<T: Real>(
    layer: &LayerWeights<T>,
    xn_rows: &[Vec<T>],
    indices: &[usize],
    config: &ModelConfig,
) -> Projected<T> {
    let (nh, hd) = (config.n_heads, config.head_dim);
    let rope = config.rope();
    let n = xn_rows.len();
    let mut out = Projected {
        q: vec![Vec::with_capacity(n * hd); nh],
        k: vec![Vec::with_capacity(n * hd); nh],
        v: vec![Vec::with_capacity(n * hd); nh],
    };
    for (xn, &pos) in xn_rows.iter().zip(indices) {
        let q = matvec(xn, &layer.wq);
        let k = matvec(xn, &layer.wk);
        let v = matvec(xn, &layer.wv);
        for h in 0..nh {
            let mut qh = q[h * hd..(h + 1) * hd].to_vec();
            let mut kh = k[h * hd..(h + 1) * hd].to_vec();
            apply_rope(&mut qh, pos, &rope);
            apply_rope(&mut kh, pos, &rope);
            out.q[h].extend_from_slice(&qh);
            out.k[h].extend_from_slice(&kh);
            out.v[h].extend_from_slice(&v[h * hd..(h + 1) * hd]);
        }
    }
    out
}

fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn ffn_block<T: Real>(h: &[T], layer: &LayerWeights<T>) -> Result<Vec<T>> {
    let xn = rmsnorm(h, &layer.ffn_norm)?;
    let mut mid = matvec(&xn, &layer.ffn_in);
    for m in mid.iter_mut() {
        *m = silu(*m);
    }
    Ok(matvec(&mid, &layer.ffn_out))
}

fn validate_tokens<T: Real>(w: &ModelWeights<T>, tokens: &[Token]) -> Result<()> {
    for &t in tokens {
        if t as usize >= w.config.vocab_size {
            return Err(Error::TokenOutOfRange(t, w.config.vocab_size));
        }
    }
    Ok(())
}

/// Runs the full prompt through the model with plain causal attention,
/// filling a fresh KV cache. Returns the logits of the last prompt token
/// and the cache. `indices` carries one strictly increasing position per
/// token (vanilla or anchor-offset).
pub fn prefill<T: Real>(
    w: &ModelWeights<T>,
    tokens: &[Token],
    indices: &[usize],
) -> Result<(Vec<T>, KVCache<T>)> {
    let config = &w.config;
    if tokens.is_empty() {
        return Err(Error::InvalidArg("prefill needs at least one token".into()));
    }
    if tokens.len() != indices.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} tokens vs {} position indices",
            tokens.len(),
            indices.len()
        )));
    }
    if indices.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArg("position indices must strictly increase".into()));
    }
    validate_tokens(w, tokens)?;

    let (nh, hd) = (config.n_heads, config.head_dim);
    let scale = T::from_f64_lossy(1.0 / (hd as f64).sqrt());
    let mut cache = KVCache::new(config.n_layers, nh, hd);
    cache.positions = indices.to_vec();

    let mut hidden: Vec<Vec<T>> = tokens
        .iter()
        .map(|&t| w.embed(t))
        .collect::<Result<_>>()?;

    for (li, layer) in w.layers.iter().enumerate() {
        let xn: Vec<Vec<T>> = hidden
            .iter()
            .map(|h| rmsnorm(h, &layer.attn_norm))
            .collect::<Result<_>>()?;
        let proj = project_qkv(layer, &xn, indices, config);
        for h in 0..nh {
            let head = &mut cache.layers[li].heads[h];
            head.k.extend_from_slice(&proj.k[h]);
            head.v.extend_from_slice(&proj.v[h]);
        }
        // Causal attention, one softmax per (token, head) over keys 0..=t.
        for (t, hid) in hidden.iter_mut().enumerate() {
            let mut attn_out = vec![T::zero(); config.dim];
            for h in 0..nh {
                let q = &proj.q[h][t * hd..(t + 1) * hd];
                let keys = &proj.k[h][..(t + 1) * hd];
                let vals = &proj.v[h][..(t + 1) * hd];
                let n_keys = t + 1;
                let mut logits = Vec::with_capacity(n_keys);
                for j in 0..n_keys {
                    let krow = &keys[j * hd..(j + 1) * hd];
                    let mut acc = T::zero();
                    for (&a, &b) in q.iter().zip(krow) {
                        acc += a * b;
                    }
                    logits.push(acc * scale);
                }
                let (probs, _) = crate::tensor::softmax_lse(&logits)?;
                let dst = &mut attn_out[h * hd..(h + 1) * hd];
                for (j, &p) in probs.iter().enumerate() {
                    let vrow = &vals[j * hd..(j + 1) * hd];
                    for (o, &vv) in dst.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
            let proj_out = matvec(&attn_out, &layer.wo);
            add_assign(hid, &proj_out);
            let f = ffn_block(hid, layer)?;
            add_assign(hid, &f);
        }
    }
    let logits = w.logits(hidden.last().expect("non-empty"))?;
    Ok((logits, cache))
}

/// Scores a batch of speculative tokens against the committed cache in one
/// pass. `spec_indices[i]` must equal the cache's next position plus the
/// token's depth in the batch (depth = visible-set size minus one), i.e.
/// positions continue contiguously along every tree path. Returns one
/// logit row per spec token plus the held-aside KV rows.
pub fn forward_spec<T: Real>(
    w: &ModelWeights<T>,
    spec_tokens: &[Token],
    spec_indices: &[usize],
    cache: &KVCache<T>,
    mask: &TreeMask,
) -> Result<(Vec<Vec<T>>, SpecKv<T>)> {
    let config = &w.config;
    let n = spec_tokens.len();
    if n == 0 {
        return Err(Error::InvalidArg("forward_spec needs at least one spec token".into()));
    }
    if spec_indices.len() != n || mask.n() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} spec tokens, {} indices, mask for {}",
            spec_indices.len(),
            mask.n()
        )));
    }
    if cache.layers.len() != config.n_layers || cache.head_dim != config.head_dim {
        return Err(Error::ShapeMismatch("cache does not match model shape".into()));
    }
    mask.validate()?;
    validate_tokens(w, spec_tokens)?;
    let base = cache.next_position();
    for (i, &idx) in spec_indices.iter().enumerate() {
        let depth = mask.visible_ids(i).len() - 1;
        let want = base + depth;
        if idx != want {
            return Err(Error::InvalidArg(format!(
                "spec token {i} at position {idx} but its path depth implies {want}"
            )));
        }
    }

    let (nh, hd) = (config.n_heads, config.head_dim);
    let mut spec_kv = SpecKv {
        layers: (0..config.n_layers)
            .map(|_| LayerKv {
                heads: vec![HeadKv::default(); nh],
            })
            .collect(),
        positions: spec_indices.to_vec(),
        visible: (0..n).map(|i| mask.visible_ids(i)).collect(),
        head_dim: hd,
    };

    let mut hidden: Vec<Vec<T>> = spec_tokens
        .iter()
        .map(|&t| w.embed(t))
        .collect::<Result<_>>()?;

    for (li, layer) in w.layers.iter().enumerate() {
        let xn: Vec<Vec<T>> = hidden
            .iter()
            .map(|h| rmsnorm(h, &layer.attn_norm))
            .collect::<Result<_>>()?;
        let proj = project_qkv(layer, &xn, spec_indices, config);
        spec_kv.layers[li] = LayerKv {
            heads: (0..nh)
                .map(|h| HeadKv {
                    k: proj.k[h].clone(),
                    v: proj.v[h].clone(),
                })
                .collect(),
        };
        let mut attn_rows = vec![vec![T::zero(); config.dim]; n];
        for h in 0..nh {
            let queries = Tensor2::from_vec(n, hd, proj.q[h].clone())?;
            let (ck, cv) = cache.head(li, h);
            let merged =
                hybrid_tree_attention(&queries, ck, cv, &proj.k[h], &proj.v[h], mask, hd)?;
            for (t, row) in attn_rows.iter_mut().enumerate() {
                row[h * hd..(h + 1) * hd].copy_from_slice(merged.row(t));
            }
        }
        for t in 0..n {
            let proj_out = matvec(&attn_rows[t], &layer.wo);
            add_assign(&mut hidden[t], &proj_out);
            let f = ffn_block(&hidden[t], layer)?;
            add_assign(&mut hidden[t], &f);
        }
    }
    let logits = hidden
        .iter()
        .map(|h| w.logits(h))
        .collect::<Result<Vec<_>>>()?;
    Ok((logits, spec_kv))
}

/// Appends the KV rows of an accepted root-anchored chain to the cache.
/// `accepted` lists spec-token ids in path order; each id's visibility set
/// must be exactly the ids accepted so far (no branch hopping), and the
/// chain's positions must continue the cache contiguously.
pub fn commit_kv<T: Real>(
    cache: &mut KVCache<T>,
    spec: &SpecKv<T>,
    accepted: &[usize],
) -> Result<()> {
    let n = spec.positions.len();
    if cache.head_dim != spec.head_dim || cache.layers.len() != spec.layers.len() {
        return Err(Error::ShapeMismatch("spec kv does not match cache shape".into()));
    }
    let mut chain: Vec<usize> = Vec::with_capacity(accepted.len());
    for (step, &id) in accepted.iter().enumerate() {
        if id >= n {
            return Err(Error::InvalidArg(format!("accepted id {id} out of {n} spec tokens")));
        }
        chain.push(id);
        let mut want = chain.clone();
        want.sort_unstable();
        if spec.visible[id] != want {
            return Err(Error::InvalidArg(
                "accepted ids do not form a root-anchored chain".into(),
            ));
        }
        let want_pos = cache.next_position() + step;
        if spec.positions[id] != want_pos {
            return Err(Error::InvalidArg(format!(
                "accepted token {id} at position {} but cache continues at {want_pos}",
                spec.positions[id]
            )));
        }
    }
    let hd = cache.head_dim;
    for &id in accepted {
        for li in 0..cache.layers.len() {
            for h in 0..cache.layers[li].heads.len() {
                let src = &spec.layers[li].heads[h];
                let k = &src.k[id * hd..(id + 1) * hd];
                let v = &src.v[id * hd..(id + 1) * hd];
                cache.push_row(li, h, k, v);
            }
        }
        cache.positions.push(spec.positions[id]);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Model file I/O
// ---------------------------------------------------------------------------

const FORMAT_TAG: &str = "specdec.model.v1";
const MAX_HEADER_BYTES: u64 = 16 * 1024 * 1024;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

fn manifest_names(config: &ModelConfig, with_draft: bool) -> Vec<(String, usize, usize)> {
    let d = config.dim;
    let mut names: Vec<(String, usize, usize)> = vec![
        ("embedding".into(), config.vocab_size, d),
        ("final_norm".into(), 1, d),
    ];
    if !config.tie_lm_head {
        names.push(("lm_head".into(), config.vocab_size, d));
    }
    for l in 0..config.n_layers {
        names.push((format!("layers.{l}.attn_norm"), 1, d));
        names.push((format!("layers.{l}.wq"), d, d));
        names.push((format!("layers.{l}.wk"), d, d));
        names.push((format!("layers.{l}.wv"), d, d));
        names.push((format!("layers.{l}.wo"), d, d));
        names.push((format!("layers.{l}.ffn_norm"), 1, d));
        names.push((format!("layers.{l}.ffn_in"), d, config.ffn_dim));
        names.push((format!("layers.{l}.ffn_out"), config.ffn_dim, d));
    }
    if with_draft {
        names.push(("draft.self_norm".into(), 1, d));
        names.push(("draft.self_wq".into(), d, d));
        names.push(("draft.self_wk".into(), d, d));
        names.push(("draft.self_wv".into(), d, d));
        names.push(("draft.self_wo".into(), d, d));
        names.push(("draft.cross_norm".into(), 1, d));
        names.push(("draft.cross_wq".into(), d, d));
        if config.cross_proj {
            names.push(("draft.cross_wk".into(), d, d));
            names.push(("draft.cross_wv".into(), d, d));
        }
        names.push(("draft.cross_wo".into(), d, d));
        names.push(("draft.ffn_norm".into(), 1, d));
        names.push(("draft.ffn_in".into(), d, config.ffn_dim));
        names.push(("draft.ffn_out".into(), config.ffn_dim, d));
        names.push(("draft.final_norm".into(), 1, d));
    }
    names
}

fn collect_tensors<'a, T: Real>(
    w: &'a ModelWeights<T>,
    draft: Option<&'a DraftWeights<T>>,
) -> Vec<(String, TensorView<'a, T>)> {
    enum Src<'a, T> {
        Mat(&'a Tensor2<T>),
        Vec(&'a Vec<T>),
    }
    // TensorView is a (rows, cols, iterator source) triple.
    let mut out: Vec<(String, TensorView<'a, T>)> = Vec::new();
    let mut push = |name: &str, src: Src<'a, T>| {
        let view = match src {
            Src::Mat(t) => TensorView {
                rows: t.rows(),
                cols: t.cols(),
                data: t.data(),
            },
            Src::Vec(v) => TensorView {
                rows: 1,
                cols: v.len(),
                data: v.as_slice(),
            },
        };
        out.push((name.to_string(), view));
    };
    push("embedding", Src::Mat(&w.embedding));
    push("final_norm", Src::Vec(&w.final_norm));
    if let Some(head) = &w.lm_head {
        push("lm_head", Src::Mat(head));
    }
    for (l, layer) in w.layers.iter().enumerate() {
        push(&format!("layers.{l}.attn_norm"), Src::Vec(&layer.attn_norm));
        push(&format!("layers.{l}.wq"), Src::Mat(&layer.wq));
        push(&format!("layers.{l}.wk"), Src::Mat(&layer.wk));
        push(&format!("layers.{l}.wv"), Src::Mat(&layer.wv));
        push(&format!("layers.{l}.wo"), Src::Mat(&layer.wo));
        push(&format!("layers.{l}.ffn_norm"), Src::Vec(&layer.ffn_norm));
        push(&format!("layers.{l}.ffn_in"), Src::Mat(&layer.ffn_in));
        push(&format!("layers.{l}.ffn_out"), Src::Mat(&layer.ffn_out));
    }
    if let Some(d) = draft {
        push("draft.self_norm", Src::Vec(&d.self_norm));
        push("draft.self_wq", Src::Mat(&d.self_wq));
        push("draft.self_wk", Src::Mat(&d.self_wk));
        push("draft.self_wv", Src::Mat(&d.self_wv));
        push("draft.self_wo", Src::Mat(&d.self_wo));
        push("draft.cross_norm", Src::Vec(&d.cross_norm));
        push("draft.cross_wq", Src::Mat(&d.cross_wq));
        if let Some(t) = &d.cross_wk {
            push("draft.cross_wk", Src::Mat(t));
        }
        if let Some(t) = &d.cross_wv {
            push("draft.cross_wv", Src::Mat(t));
        }
        push("draft.cross_wo", Src::Mat(&d.cross_wo));
        push("draft.ffn_norm", Src::Vec(&d.ffn_norm));
        push("draft.ffn_in", Src::Mat(&d.ffn_in));
        push("draft.ffn_out", Src::Mat(&d.ffn_out));
        push("draft.final_norm", Src::Vec(&d.final_norm));
    }
    out
}

struct TensorView<'a, T> {
    rows: usize,
    cols: usize,
    data: &'a [T],
}

/// Writes the model (and optionally the draft block) as one binary file:
/// `u64 LE header length | JSON header | raw LE f32 payload`.
pub fn save_model<T: Real>(
    path: &Path,
    w: &ModelWeights<T>,
    draft: Option<&DraftWeights<T>>,
) -> Result<()> {
    w.config.validate()?;
    let tensors = collect_tensors(w, draft);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0_usize;
    for (name, view) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            rows: view.rows,
            cols: view.cols,
            offset,
        });
        offset += view.rows * view.cols * 4;
    }
    let header = Header {
        format: FORMAT_TAG.to_string(),
        config: w.config.clone(),
        tensors: entries,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::InvalidArg(format!("header: {e}")))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    for (_, view) in &tensors {
        for x in view.data {
            f.write_all(&(x.to_f64_lossy() as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedModel(msg.into())
}

/// Reads a model file written by [`save_model`]. Returns the target
/// weights and, when the file carries `draft.*` tensors, the draft block.
pub fn load_model<T: Real>(path: &Path) -> Result<(ModelWeights<T>, Option<DraftWeights<T>>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_bytes = [0_u8; 8];
    f.read_exact(&mut len_bytes)
        .map_err(|_| malformed("file shorter than its header length field"))?;
    let header_len = u64::from_le_bytes(len_bytes);
    if header_len == 0 || header_len > MAX_HEADER_BYTES {
        return Err(malformed(format!("implausible header length {header_len}")));
    }
    let mut header_bytes = vec![0_u8; header_len as usize];
    f.read_exact(&mut header_bytes)
        .map_err(|_| malformed("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| malformed(format!("bad header: {e}")))?;
    if header.format != FORMAT_TAG {
        return Err(malformed(format!("unknown format tag {:?}", header.format)));
    }
    header.config.validate().map_err(|e| malformed(format!("bad config: {e}")))?;

    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    if payload.len() % 4 != 0 {
        return Err(malformed("payload is not a whole number of f32 values"));
    }

    let with_draft = header.tensors.iter().any(|t| t.name.starts_with("draft."));
    let expected = manifest_names(&header.config, with_draft);
    if header.tensors.len() != expected.len() {
        return Err(malformed(format!(
            "expected {} tensors, header lists {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    let mut total = 0_usize;
    let mut by_name: HashMap<&str, &TensorEntry> = HashMap::new();
    for e in &header.tensors {
        by_name.insert(e.name.as_str(), e);
        total += e.rows * e.cols * 4;
    }
    if total != payload.len() {
        return Err(malformed(format!(
            "payload is {} bytes but tensors claim {total}",
            payload.len()
        )));
    }

    let read_tensor = |name: &str, rows: usize, cols: usize| -> Result<Tensor2<T>> {
        let e = by_name
            .get(name)
            .ok_or_else(|| malformed(format!("missing tensor {name}")))?;
        if e.rows != rows || e.cols != cols {
            return Err(malformed(format!(
                "tensor {name} is {}x{}, expected {rows}x{cols}",
                e.rows, e.cols
            )));
        }
        let n = rows * cols;
        let end = e.offset.checked_add(n * 4).filter(|&end| end <= payload.len());
        let end = end.ok_or_else(|| malformed(format!("tensor {name} overruns the payload")))?;
        let mut data = Vec::with_capacity(n);
        for chunk in payload[e.offset..end].chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(malformed(format!("non-finite value in tensor {name}")));
            }
            data.push(T::from_f64_lossy(v as f64));
        }
        Tensor2::from_vec(rows, cols, data)
    };
    let read_vec = |name: &str, len: usize| -> Result<Vec<T>> {
        Ok(read_tensor(name, 1, len)?.data().to_vec())
    };

    for (name, rows, cols) in &expected {
        let e = by_name
            .get(name.as_str())
            .ok_or_else(|| malformed(format!("missing tensor {name}")))?;
        if e.rows != *rows || e.cols != *cols {
            return Err(malformed(format!(
                "tensor {name} is {}x{}, expected {rows}x{cols}",
                e.rows, e.cols
            )));
        }
    }

    let config = header.config.clone();
    let d = config.dim;
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        layers.push(LayerWeights {
            attn_norm: read_vec(&format!("layers.{l}.attn_norm"), d)?,
            wq: read_tensor(&format!("layers.{l}.wq"), d, d)?,
            wk: read_tensor(&format!("layers.{l}.wk"), d, d)?,
            wv: read_tensor(&format!("layers.{l}.wv"), d, d)?,
            wo: read_tensor(&format!("layers.{l}.wo"), d, d)?,
            ffn_norm: read_vec(&format!("layers.{l}.ffn_norm"), d)?,
            ffn_in: read_tensor(&format!("layers.{l}.ffn_in"), d, config.ffn_dim)?,
            ffn_out: read_tensor(&format!("layers.{l}.ffn_out"), config.ffn_dim, d)?,
        });
    }
    let weights = ModelWeights {
        embedding: read_tensor("embedding", config.vocab_size, d)?,
        final_norm: read_vec("final_norm", d)?,
        lm_head: if config.tie_lm_head {
            None
        } else {
            Some(read_tensor("lm_head", config.vocab_size, d)?)
        },
        layers,
        config: config.clone(),
    };
    let draft = if with_draft {
        Some(DraftWeights {
            self_norm: read_vec("draft.self_norm", d)?,
            self_wq: read_tensor("draft.self_wq", d, d)?,
            self_wk: read_tensor("draft.self_wk", d, d)?,
            self_wv: read_tensor("draft.self_wv", d, d)?,
            self_wo: read_tensor("draft.self_wo", d, d)?,
            cross_norm: read_vec("draft.cross_norm", d)?,
            cross_wq: read_tensor("draft.cross_wq", d, d)?,
            cross_wk: if config.cross_proj {
                Some(read_tensor("draft.cross_wk", d, d)?)
            } else {
                None
            },
            cross_wv: if config.cross_proj {
                Some(read_tensor("draft.cross_wv", d, d)?)
            } else {
                None
            },
            cross_wo: read_tensor("draft.cross_wo", d, d)?,
            ffn_norm: read_vec("draft.ffn_norm", d)?,
            ffn_in: read_tensor("draft.ffn_in", d, config.ffn_dim)?,
            ffn_out: read_tensor("draft.ffn_out", config.ffn_dim, d)?,
            final_norm: read_vec("draft.final_norm", d)?,
        })
    } else {
        None
    };
    Ok((weights, draft))
}
