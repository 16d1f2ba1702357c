//! Speculation trees and their attention masks.
//!
//! A tree is drafted level by level with per-level beam widths. Every
//! active node proposes candidates for the next level, all candidates are
//! re-ranked globally by cumulative log-probability, and the top `width`
//! stay active. Nodes that lose the re-rank are halted, not deleted: they
//! remain in the tree, get scored by the target in the same batch, and can
//! still be accepted by verification. Nothing is ever re-ordered or
//! copied; a node's identity is its index, and per-branch draft state
//! lives in cheap cloned window views rather than a shared cache that
//! would need gathering.
//!
//! Ranking ties break toward the lower token id, then earlier creation
//! order (which follows parent rank), so drafting is fully deterministic.

use serde::Serialize;

use crate::draft::{draft_forward, DraftWeights, WindowCache};
use crate::error::{Error, Result};
use crate::model::{KVCache, ModelWeights, Token};
use crate::positions::PositionIndices;
use crate::tensor::{sample_index, softmax_lse, Real, RngStream};

// ---------------------------------------------------------------------------
// Tree mask
// ---------------------------------------------------------------------------

/// Square boolean visibility mask over one batch of spec tokens.
/// `allowed(i, j)` means query `i` attends key `j`. Valid masks are
/// reflexive, lower-triangular (keys precede queries), and
/// ancestor-closed: whatever `j` sees, any `i` that sees `j` sees too.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeMask {
    n: usize,
    allow: Vec<bool>,
}

impl TreeMask {
    /// Builds and validates a mask from explicit rows.
    pub fn from_rows(rows: Vec<Vec<bool>>) -> Result<Self> {
        let n = rows.len();
        let mut allow = Vec::with_capacity(n * n);
        for r in &rows {
            if r.len() != n {
                return Err(Error::InvalidTreeMask);
            }
            allow.extend_from_slice(r);
        }
        let mask = TreeMask { n, allow };
        mask.validate()?;
        Ok(mask)
    }

    /// Mask from parent links; `parents[i]` must point below `i`.
    pub fn from_parents(parents: &[Option<usize>]) -> Result<Self> {
        let n = parents.len();
        let mut allow = vec![false; n * n];
        for i in 0..n {
            allow[i * n + i] = true;
            let mut cur = parents[i];
            let mut steps = 0;
            while let Some(p) = cur {
                if p >= i || steps > n {
                    // Forward links and cycles cannot form a tree.
                    return Err(Error::InvalidTreeMask);
                }
                allow[i * n + p] = true;
                cur = parents[p];
                steps += 1;
            }
        }
        Ok(TreeMask { n, allow })
    }

    /// Mask of a single chain: token `i` sees tokens `0..=i`.
    pub fn chain(n: usize) -> Self {
        let mut allow = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allow[i * n + j] = true;
            }
        }
        TreeMask { n, allow }
    }

    /// One-token mask (the smallest chain).
    pub fn single() -> Self {
        TreeMask::chain(1)
    }

    /// Prepends one token visible to everything: used when a pending
    /// (not yet committed) token rides along in front of a tree batch.
    pub fn with_root_prefix(&self) -> TreeMask {
        let n = self.n + 1;
        let mut allow = vec![false; n * n];
        allow[0] = true;
        for i in 0..self.n {
            allow[(i + 1) * n] = true;
            for j in 0..self.n {
                allow[(i + 1) * n + (j + 1)] = self.allowed(i, j);
            }
        }
        TreeMask { n, allow }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.n..(i + 1) * self.n]
    }

    /// Ascending ids visible to query `i` (always includes `i`).
    pub fn visible_ids(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.allowed(i, j)).collect()
    }

    /// Checks reflexivity, key-before-query order, and ancestor closure.
    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        for i in 0..n {
            if !self.allowed(i, i) {
                return Err(Error::InvalidTreeMask);
            }
            for j in 0..n {
                if !self.allowed(i, j) {
                    continue;
                }
                if j > i {
                    return Err(Error::InvalidTreeMask);
                }
                if j != i {
                    for k in 0..n {
                        if self.allowed(j, k) && !self.allowed(i, k) {
                            return Err(Error::InvalidTreeMask);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Speculation tree
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    /// Level, 1-based; depth-1 nodes hang off the root token.
    pub depth: usize,
    pub token: Token,
    pub position: usize,
    /// Cumulative draft log-probability along the path from the root.
    pub cum_logprob: f64,
    /// Survived its level's re-rank; halted nodes keep `false`.
    pub active: bool,
}

/// One drafted speculation tree. Nodes are stored level by level, so ids
/// are parent-before-child. Proposal distributions are retained for
/// stochastic verification: `root_dist` proposed the depth-1 children and
/// `expand_dists[i]` (expanded nodes only) proposed node i's children.
#[derive(Debug, Clone)]
pub struct SpeculationTree<T> {
    pub root_token: Token,
    /// Position of depth-1 nodes; the root token sits one before.
    pub root_pos: usize,
    pub nodes: Vec<TreeNode>,
    pub root_dist: Vec<T>,
    pub expand_dists: Vec<Option<Vec<T>>>,
    /// Active node ids per level, in rank order.
    pub active_by_level: Vec<Vec<usize>>,
}

impl<T: Real> SpeculationTree<T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Children of a node (or of the root for `None`), in id order.
    pub fn children(&self, parent: Option<usize>) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.parent == parent)
            .map(|n| n.id)
            .collect()
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        self.nodes.iter().map(|n| n.parent).collect()
    }

    /// Root-anchored path of ids ending at `id`.
    pub fn path_to(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = self.nodes[id].parent;
        while let Some(p) = cur {
            path.push(p);
            cur = self.nodes[p].parent;
        }
        path.reverse();
        path
    }

    /// Token sequence along the path to `id`.
    pub fn path_tokens(&self, id: usize) -> Vec<Token> {
        self.path_to(id).iter().map(|&i| self.nodes[i].token).collect()
    }

    /// JSON view of the tree (tokens, shape, scores) for dump files.
    pub fn dump(&self) -> serde_json::Value {
        serde_json::json!({
            "root_token": self.root_token,
            "root_pos": self.root_pos,
            "nodes": self.nodes,
        })
    }
}

/// Visibility mask for a tree's nodes in id order.
pub fn build_tree_mask<T: Real>(tree: &SpeculationTree<T>) -> Result<TreeMask> {
    TreeMask::from_parents(&tree.parents())
}

/// Flattens a tree for one batched forward: tokens, positions, and the
/// node order (ids are already parent-before-child).
pub fn linearize<T: Real>(tree: &SpeculationTree<T>) -> (Vec<Token>, PositionIndices, Vec<usize>) {
    let tokens = tree.nodes.iter().map(|n| n.token).collect();
    let positions = tree.nodes.iter().map(|n| n.position).collect();
    let order = (0..tree.nodes.len()).collect();
    (tokens, positions, order)
}

// ---------------------------------------------------------------------------
// Drafting
// ---------------------------------------------------------------------------

/// Proposal distribution from raw logits: softmax at `temperature`, or at
/// 1 when `temperature` is zero (greedy drafting ranks, never samples).
pub fn proposal_probs<T: Real>(logits: &[T], temperature: f64) -> Result<Vec<T>> {
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let inv = T::from_f64_lossy(1.0 / t);
    let scaled: Vec<T> = logits.iter().map(|&l| l * inv).collect();
    Ok(softmax_lse(&scaled)?.0)
}

/// A drafting strategy the tree builder can drive. `View` is whatever
/// per-branch state one more token of context produces; views fork by
/// cloning and the builder never mutates a parent's view in place.
pub trait Proposer<T: Real> {
    type View: Clone;

    /// Consume `token` at `pos` on top of `view`: return the proposal
    /// distribution over the next token and the advanced view.
    fn advance(&mut self, view: &Self::View, token: Token, pos: usize)
        -> Result<(Vec<T>, Self::View)>;

    /// True for proposers that draw children even in greedy decoding.
    fn always_samples(&self) -> bool {
        false
    }
}

/// The real drafting strategy: one draft-block step per node, with the
/// sliding window as the per-branch view.
pub struct GlideProposer<'a, T: Real> {
    pub draft: &'a DraftWeights<T>,
    pub target: &'a ModelWeights<T>,
    pub cache: &'a KVCache<T>,
    pub cross_layer: Option<usize>,
    pub temperature: f64,
}

impl<'a, T: Real> Proposer<T> for GlideProposer<'a, T> {
    type View = WindowCache<T>;

    fn advance(
        &mut self,
        view: &WindowCache<T>,
        token: Token,
        pos: usize,
    ) -> Result<(Vec<T>, WindowCache<T>)> {
        let mut v = view.clone();
        let logits = draft_forward(
            self.draft,
            self.target,
            token,
            pos,
            &mut v,
            self.cache,
            self.cross_layer,
        )?;
        Ok((proposal_probs(&logits, self.temperature)?, v))
    }
}

/// Top-`w` picks (probability descending, token ascending on ties) or `w`
/// i.i.d. draws, as `(token, log-prob)` pairs.
fn select<T: Real>(
    dist: &[T],
    w: usize,
    sample: bool,
    rng: &mut RngStream,
) -> Result<Vec<(Token, f64)>> {
    if dist.is_empty() {
        return Err(Error::EmptyLogits);
    }
    if sample {
        let mut out = Vec::with_capacity(w);
        for _ in 0..w {
            let i = sample_index(dist, rng.uniform())?;
            out.push((i as Token, dist[i].to_f64_lossy().ln()));
        }
        Ok(out)
    } else {
        let mut idx: Vec<usize> = (0..dist.len()).collect();
        idx.sort_by(|&a, &b| {
            dist[b]
                .to_f64_lossy()
                .total_cmp(&dist[a].to_f64_lossy())
                .then(a.cmp(&b))
        });
        idx.truncate(w.min(dist.len()));
        Ok(idx
            .into_iter()
            .map(|i| (i as Token, dist[i].to_f64_lossy().ln()))
            .collect())
    }
}

/// Grows a tree level by level under `beam_widths`. The caller has already
/// consumed the root token: `root_dist` is its proposal distribution,
/// `root_view` the view after it, and `root_pos` the position depth-1
/// tokens will occupy. Greedy drafting (`temperature == 0`) takes top-k
/// unless the proposer insists on sampling; stochastic drafting draws
/// children i.i.d. from each proposal distribution, as stochastic
/// verification requires.
#[allow(clippy::too_many_arguments)]
pub fn build_tree<T: Real, P: Proposer<T>>(
    proposer: &mut P,
    root_token: Token,
    root_pos: usize,
    root_dist: Vec<T>,
    root_view: P::View,
    beam_widths: &[usize],
    temperature: f64,
    rng: &mut RngStream,
) -> Result<SpeculationTree<T>> {
    if beam_widths.contains(&0) {
        return Err(Error::InvalidArg("beam widths must be positive".into()));
    }
    let sample = temperature > 0.0 || proposer.always_samples();
    let mut tree = SpeculationTree {
        root_token,
        root_pos,
        nodes: Vec::new(),
        root_dist: root_dist.clone(),
        expand_dists: Vec::new(),
        active_by_level: Vec::new(),
    };
    if beam_widths.is_empty() {
        return Ok(tree);
    }

    // View after consuming each expanded node, indexed by node id.
    let mut views: Vec<Option<P::View>> = Vec::new();

    let new_node = |tree: &mut SpeculationTree<T>,
                        views: &mut Vec<Option<P::View>>,
                        parent: Option<usize>,
                        depth: usize,
                        token: Token,
                        cum: f64| {
        let id = tree.nodes.len();
        tree.nodes.push(TreeNode {
            id,
            parent,
            depth,
            token,
            position: root_pos + depth - 1,
            cum_logprob: cum,
            active: false,
        });
        tree.expand_dists.push(None);
        views.push(None);
        id
    };

    // Depth 1: candidates straight from the root distribution.
    let picks = select(&root_dist, beam_widths[0], sample, rng)?;
    let mut level: Vec<usize> = Vec::new();
    for (token, logp) in picks {
        let id = new_node(&mut tree, &mut views, None, 1, token, logp);
        tree.nodes[id].active = true;
        level.push(id);
    }
    rank_ids(&tree, &mut level);
    tree.active_by_level.push(level.clone());

    for d in 2..=beam_widths.len() {
        let w = beam_widths[d - 1];
        let mut cand_ids: Vec<usize> = Vec::new();
        for &pid in &level {
            let parent_view = match tree.nodes[pid].parent {
                None => &root_view,
                Some(gp) => views[gp].as_ref().expect("active node's parent was expanded"),
            };
            let (dist, view) =
                proposer.advance(parent_view, tree.nodes[pid].token, tree.nodes[pid].position)?;
            let picks = select(&dist, w, sample, rng)?;
            tree.expand_dists[pid] = Some(dist);
            views[pid] = Some(view);
            let base_cum = tree.nodes[pid].cum_logprob;
            for (token, logp) in picks {
                let id = new_node(&mut tree, &mut views, Some(pid), d, token, base_cum + logp);
                cand_ids.push(id);
            }
        }
        // Global re-rank; the top w survive, the rest halt in place.
        rank_ids(&tree, &mut cand_ids);
        cand_ids.truncate(w);
        for &id in &cand_ids {
            tree.nodes[id].active = true;
        }
        level = cand_ids;
        tree.active_by_level.push(level.clone());
    }
    Ok(tree)
}

/// Stable rank: cumulative log-prob descending, token ascending, then
/// creation order (ids ascend with parent rank within a level).
fn rank_ids<T: Real>(tree: &SpeculationTree<T>, ids: &mut [usize]) {
    ids.sort_by(|&a, &b| {
        let na = &tree.nodes[a];
        let nb = &tree.nodes[b];
        nb.cum_logprob
            .total_cmp(&na.cum_logprob)
            .then(na.token.cmp(&nb.token))
            .then(a.cmp(&b))
    });
}

/// Drafts a speculation tree with the real draft model. Consumes the root
/// token (at `root_token_pos`) into the base window, then builds the tree
/// over cloned views; the base window is never touched again, so the only
/// lasting effect is that one committed-root push.
#[allow(clippy::too_many_arguments)]
pub fn draft_tree<T: Real>(
    draft: &DraftWeights<T>,
    target: &ModelWeights<T>,
    cache: &KVCache<T>,
    wcache: &mut WindowCache<T>,
    root_token: Token,
    root_token_pos: usize,
    beam_widths: &[usize],
    temperature: f64,
    cross_layer: Option<usize>,
    rng: &mut RngStream,
) -> Result<SpeculationTree<T>> {
    let logits = draft_forward(draft, target, root_token, root_token_pos, wcache, cache, cross_layer)?;
    let root_dist = proposal_probs(&logits, temperature)?;
    let mut proposer = GlideProposer {
        draft,
        target,
        cache,
        cross_layer,
        temperature,
    };
    build_tree(
        &mut proposer,
        root_token,
        root_token_pos + 1,
        root_dist,
        wcache.clone(),
        beam_widths,
        temperature,
        rng,
    )
}
