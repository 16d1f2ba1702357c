//! Verification and the speculative decode loop.
//!
//! One decode round drafts a speculation tree, scores every node with a
//! single batched target forward, walks the tree accepting tokens, and
//! always emits one bonus token from the distribution at the deepest
//! accepted node. Rejected and halted nodes cost nothing to undo: their
//! held-aside KV rows are simply dropped.
//!
//! The bonus token is emitted before the target has ever attended to it,
//! so it cannot be committed yet. It rides in front of the next round's
//! batch as a pending prefix row, visible to the whole tree; that same
//! row's logits are the starting distribution for the next verification
//! walk, which is what makes the loop exact: every emitted token was
//! drawn from (greedy: the argmax of) the target's distribution given all
//! previously emitted tokens.
//!
//! Accounting: `target_forwards` counts exactly the batched verification
//! forwards (plus, in vanilla mode, each single-token step). Prefill is
//! never counted, and the vanilla first token — read straight off the
//! prefill logits — is excluded from `total_tokens`, so vanilla reports
//! tau of exactly 1. Draft steps and the scratch forwards behind the
//! oracle/noisy reference policies are not target forwards in this sense:
//! those policies model a drafter of known quality, and charging for
//! their bookkeeping would make tau meaningless.

use std::time::Instant;

use serde::Serialize;

use crate::draft::{push_token, DraftWeights, WindowCache};
use crate::error::{Error, Result};
use crate::model::{commit_kv, forward_spec, prefill, KVCache, ModelWeights, Token};
use crate::tensor::{argmax_tie_low, sample_index, softmax_lse, Real, RngStream};
use crate::tree::{
    build_tree, build_tree_mask, draft_tree, linearize, proposal_probs, Proposer,
    SpeculationTree, TreeMask,
};

// ---------------------------------------------------------------------------
// Results and metrics
// ---------------------------------------------------------------------------

/// Outcome of verifying one speculation tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyResult {
    /// Accepted node ids in path order (root-anchored chain).
    pub accepted_path: Vec<usize>,
    /// Token emitted from the distribution at the deepest accepted node.
    pub bonus_token: Token,
    /// Tokens this round emits: path length plus one for the bonus, so
    /// always at least one.
    pub accepted_count: usize,
}

/// Throughput accounting for one decode run.
#[derive(Debug, Clone, Serialize)]
pub struct DecodeMetrics {
    /// Tokens produced by counted target forwards (vanilla's free first
    /// token is excluded).
    pub total_tokens: usize,
    /// Counted target forwards: one per verification round, or one per
    /// vanilla step. Prefill and drafting never count.
    pub target_forwards: usize,
    /// `total_tokens / target_forwards` — tokens per target forward.
    pub tau: f64,
    /// Wall-clock time of the whole run (prefill included).
    pub wall_seconds: f64,
    /// `accept_histogram[k]` = verification rounds that emitted exactly
    /// `k` tokens (accepted plus bonus). Empty in vanilla mode.
    pub accept_histogram: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// One target forward per token; the baseline speculation must match.
    Vanilla,
    /// Linear speculation: a chain tree (all beam widths are one).
    Chain,
    /// Tree speculation with per-level beam widths.
    Tree,
}

/// Where speculative proposals come from.
pub enum DraftPolicy<'a, T: Real> {
    /// The real draft model, windowed self-attention over the target cache.
    Glide {
        draft: &'a DraftWeights<T>,
        /// Target layer whose cache the draft cross-attends (default: last).
        cross_layer: Option<usize>,
    },
    /// Reference drafter that proposes the target's own distribution;
    /// every speculated token is accepted, bounding tau at gamma + 1.
    Oracle,
    /// Reference drafter that proposes the target's greedy token with this
    /// probability and a uniformly random other token otherwise.
    Noisy(f64),
}

/// Run parameters for [`decode_loop`].
#[derive(Debug, Clone)]
pub struct DecodeParams {
    pub gen_len: usize,
    pub mode: DecodeMode,
    /// Per-level beam widths (chain mode requires all ones); ignored by
    /// vanilla.
    pub beam_widths: Vec<usize>,
    /// Zero decodes greedily; positive decodes stochastically at this
    /// softmax temperature.
    pub temperature: f64,
    pub seed: u64,
    /// Record a JSON dump of every drafted tree and its verification.
    pub dump_trees: bool,
}

/// Generated tokens plus accounting for one run.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// Exactly `gen_len` generated tokens (prompt not included).
    pub tokens: Vec<Token>,
    pub metrics: DecodeMetrics,
    /// One entry per verification round when `dump_trees` is set.
    pub tree_dumps: Vec<serde_json::Value>,
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

/// Greedy verification: walk the tree from the root, at each step taking
/// the target argmax (ties to the lowest token id) and descending into the
/// first child in id order carrying that token. The bonus token is the
/// argmax at the deepest accepted node. `root_logits` is the target
/// distribution over the root's successor; `node_logits[i]` belongs to
/// tree node `i`.
pub fn verify_greedy<T: Real>(
    tree: &SpeculationTree<T>,
    node_logits: &[Vec<T>],
    root_logits: &[T],
) -> Result<VerifyResult> {
    if node_logits.len() != tree.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows for {} tree nodes",
            node_logits.len(),
            tree.len()
        )));
    }
    let mut path: Vec<usize> = Vec::new();
    let mut cur: Option<usize> = None;
    loop {
        let logits = match cur {
            None => root_logits,
            Some(i) => &node_logits[i],
        };
        let want = argmax_tie_low(logits)? as Token;
        let next = tree
            .children(cur)
            .into_iter()
            .find(|&k| tree.nodes[k].token == want);
        match next {
            Some(k) => {
                path.push(k);
                cur = Some(k);
            }
            None => {
                return Ok(VerifyResult {
                    accepted_count: path.len() + 1,
                    accepted_path: path,
                    bonus_token: want,
                });
            }
        }
    }
}

/// Softmax of `logits / temperature` in f64.
fn target_dist<T: Real>(logits: &[T], temperature: f64) -> Result<Vec<f64>> {
    let scaled: Vec<f64> = logits
        .iter()
        .map(|&l| l.to_f64_lossy() / temperature)
        .collect();
    Ok(softmax_lse(&scaled)?.0)
}

/// Stochastic verification with residual corrections. At each node the
/// children (sampled i.i.d. from the stored proposal distribution `q`) are
/// tried in id order: child `c` is accepted with probability
/// `min(1, p(c) / q(c))`; each rejection replaces `p` with the normalized
/// positive part of `p - q` before the next child is tried. When no child
/// survives, the bonus token is drawn from the final residual, so one
/// token is always emitted and the emitted sequence is distributed exactly
/// as target sampling at `temperature`.
pub fn verify_sampled<T: Real>(
    tree: &SpeculationTree<T>,
    node_logits: &[Vec<T>],
    root_logits: &[T],
    temperature: f64,
    rng: &mut RngStream,
) -> Result<VerifyResult> {
    if temperature <= 0.0 {
        return Err(Error::InvalidArg(
            "stochastic verification needs a positive temperature".into(),
        ));
    }
    if node_logits.len() != tree.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows for {} tree nodes",
            node_logits.len(),
            tree.len()
        )));
    }
    let mut p = target_dist(root_logits, temperature)?;
    let mut path: Vec<usize> = Vec::new();
    let mut cur: Option<usize> = None;
    loop {
        let kids = tree.children(cur);
        if kids.is_empty() {
            break;
        }
        let q = match cur {
            None => &tree.root_dist,
            Some(i) => tree.expand_dists[i]
                .as_ref()
                .ok_or_else(|| Error::InvalidArg("tree node has children but no proposal".into()))?,
        };
        if q.len() != p.len() {
            return Err(Error::ShapeMismatch(format!(
                "proposal over {} tokens, target over {}",
                q.len(),
                p.len()
            )));
        }
        let qf: Vec<f64> = q.iter().map(|&x| x.to_f64_lossy()).collect();
        let mut descended = false;
        for k in kids {
            let t = tree.nodes[k].token as usize;
            // A proposed token the proposal itself gives zero mass cannot
            // come from an honest drafter; accept it (the ratio is formally
            // infinite) rather than distort the residual, and say so.
            let ratio = if qf[t] > 0.0 {
                (p[t] / qf[t]).min(1.0)
            } else {
                log::warn!("proposed token {t} has zero draft probability; accepting");
                1.0
            };
            if rng.uniform() < ratio {
                path.push(k);
                p = target_dist(&node_logits[k], temperature)?;
                cur = Some(k);
                descended = true;
                break;
            }
            // Fold the proposal out of the target and renormalize. A
            // non-positive residual means p <= q pointwise; that draw had
            // probability zero, so keeping p is sound.
            let mut residual: Vec<f64> = p.iter().zip(&qf).map(|(&a, &b)| (a - b).max(0.0)).collect();
            let s: f64 = residual.iter().sum();
            if s > 0.0 {
                for r in residual.iter_mut() {
                    *r /= s;
                }
                p = residual;
            }
        }
        if !descended {
            break;
        }
    }
    let bonus_token = sample_index(&p, rng.uniform())? as Token;
    Ok(VerifyResult {
        accepted_count: path.len() + 1,
        accepted_path: path,
        bonus_token,
    })
}

// ---------------------------------------------------------------------------
// Reference draft policies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum PolicyKind {
    Oracle,
    Noisy(f64),
}

/// The policy's proposal distribution given target logits at a node.
fn policy_dist<T: Real>(kind: PolicyKind, logits: &[T], temperature: f64) -> Result<Vec<T>> {
    match kind {
        PolicyKind::Oracle => proposal_probs(logits, temperature),
        PolicyKind::Noisy(hit) => noisy_dist(logits, hit),
    }
}

/// Mixture that lands on the target argmax with probability `hit` and on
/// each other token with probability `(1 - hit) / (vocab - 1)`.
fn noisy_dist<T: Real>(logits: &[T], hit: f64) -> Result<Vec<T>> {
    if !(0.0..=1.0).contains(&hit) {
        return Err(Error::InvalidArg(format!(
            "noisy hit rate must lie in [0, 1], got {hit}"
        )));
    }
    let v = logits.len();
    if v < 2 {
        return Err(Error::InvalidArg("noisy policy needs a vocab of at least 2".into()));
    }
    let star = argmax_tie_low(logits)?;
    let other = (1.0 - hit) / (v - 1) as f64;
    Ok((0..v)
        .map(|i| T::from_f64_lossy(if i == star { hit } else { other }))
        .collect())
}

/// Drafting strategy for the oracle/noisy reference policies: the view is
/// the scratch token path beyond the committed cache, re-scored from the
/// cache with an uncounted chain forward per step.
struct PolicyProposer<'a, T: Real> {
    target: &'a ModelWeights<T>,
    cache: &'a KVCache<T>,
    kind: PolicyKind,
    temperature: f64,
}

impl<'a, T: Real> Proposer<T> for PolicyProposer<'a, T> {
    type View = Vec<Token>;

    fn advance(&mut self, view: &Vec<Token>, token: Token, pos: usize) -> Result<(Vec<T>, Vec<Token>)> {
        let mut path = view.clone();
        path.push(token);
        let base = self.cache.next_position();
        debug_assert_eq!(pos, base + path.len() - 1);
        let indices: Vec<usize> = (0..path.len()).map(|k| base + k).collect();
        let mask = TreeMask::chain(path.len());
        let (logits, _) = forward_spec(self.target, &path, &indices, self.cache, &mask)?;
        let dist = policy_dist(self.kind, logits.last().expect("non-empty path"), self.temperature)?;
        Ok((dist, path))
    }

    fn always_samples(&self) -> bool {
        // The noisy drafter's whole point is drawing from the mixture;
        // taking its top pick would be an always-correct drafter.
        matches!(self.kind, PolicyKind::Noisy(_))
    }
}

// ---------------------------------------------------------------------------
// Decode loop
// ---------------------------------------------------------------------------

struct RoundOutcome<T> {
    tree: SpeculationTree<T>,
    result: VerifyResult,
}

/// Runs one full decode: prefill, then vanilla or speculative generation
/// of exactly `params.gen_len` tokens. Deterministic given weights,
/// prompt, and parameters; `params.seed` keys the sampling stream.
pub fn decode_loop<T: Real>(
    target: &ModelWeights<T>,
    policy: &DraftPolicy<'_, T>,
    prompt: &[Token],
    prompt_indices: &[usize],
    params: &DecodeParams,
) -> Result<DecodeOutput> {
    let start = Instant::now();
    if params.gen_len == 0 {
        return Err(Error::InvalidArg("gen_len must be positive".into()));
    }
    if !params.temperature.is_finite() || params.temperature < 0.0 {
        return Err(Error::InvalidArg(format!(
            "temperature must be finite and non-negative, got {}",
            params.temperature
        )));
    }
    match params.mode {
        DecodeMode::Vanilla => {}
        DecodeMode::Chain => {
            if params.beam_widths.is_empty() || params.beam_widths.iter().any(|&w| w != 1) {
                return Err(Error::InvalidArg(
                    "chain mode needs beam widths of all ones".into(),
                ));
            }
        }
        DecodeMode::Tree => {
            if params.beam_widths.is_empty() {
                return Err(Error::InvalidArg("tree mode needs beam widths".into()));
            }
        }
    }
    if let DraftPolicy::Noisy(hit) = policy {
        if !(0.0..=1.0).contains(hit) {
            return Err(Error::InvalidArg(format!(
                "noisy hit rate must lie in [0, 1], got {hit}"
            )));
        }
    }

    let mut rng = RngStream::new(params.seed, "sampling");
    let (prefill_logits, mut cache) = prefill(target, prompt, prompt_indices)?;

    let mut tokens: Vec<Token> = Vec::with_capacity(params.gen_len + params.beam_widths.len() + 1);
    let mut dumps: Vec<serde_json::Value> = Vec::new();
    let mut target_forwards = 0usize;

    if params.mode == DecodeMode::Vanilla {
        // First token straight off the prefill logits: zero counted
        // forwards, hence excluded from total_tokens below.
        tokens.push(pick_token(&prefill_logits, params.temperature, &mut rng)?);
        while tokens.len() < params.gen_len {
            let tok = *tokens.last().expect("non-empty");
            let pos = cache.next_position();
            let (logits, spec) =
                forward_spec(target, &[tok], &[pos], &cache, &TreeMask::single())?;
            commit_kv(&mut cache, &spec, &[0])?;
            target_forwards += 1;
            tokens.push(pick_token(&logits[0], params.temperature, &mut rng)?);
        }
        tokens.truncate(params.gen_len);
        let total_tokens = tokens.len() - 1;
        return Ok(DecodeOutput {
            tokens,
            metrics: finish_metrics(total_tokens, target_forwards, Vec::new(), start),
            tree_dumps: dumps,
        });
    }

    // Speculative modes. Round 1 roots at the last prompt token (already
    // committed, successor distribution known from prefill); later rounds
    // root at the pending bonus token.
    let gamma = params.beam_widths.len();
    let mut histogram = vec![0u64; gamma + 2];

    let mut wcache = match policy {
        DraftPolicy::Glide { .. } => {
            let mut wc = WindowCache::new(target.config.window_w)?;
            if let DraftPolicy::Glide { draft, .. } = policy {
                for (i, &t) in prompt.iter().take(prompt.len() - 1).enumerate() {
                    push_token(draft, target, t, prompt_indices[i], &mut wc)?;
                }
            }
            Some(wc)
        }
        _ => None,
    };

    let mut root_token = *prompt.last().expect("prefill checked non-empty");
    let mut root_pos = *prompt_indices.last().expect("prefill checked non-empty");
    let mut carried_logits: Option<Vec<T>> = Some(prefill_logits);

    while tokens.len() < params.gen_len {
        let pending = carried_logits.is_none();

        // Draft a tree rooted at the current root token.
        let tree = match policy {
            DraftPolicy::Glide { draft, cross_layer } => draft_tree(
                draft,
                target,
                &cache,
                wcache.as_mut().expect("glide window"),
                root_token,
                root_pos,
                &params.beam_widths,
                params.temperature,
                *cross_layer,
                &mut rng,
            )?,
            DraftPolicy::Oracle | DraftPolicy::Noisy(_) => {
                let kind = match policy {
                    DraftPolicy::Noisy(h) => PolicyKind::Noisy(*h),
                    _ => PolicyKind::Oracle,
                };
                let mut proposer = PolicyProposer {
                    target,
                    cache: &cache,
                    kind,
                    temperature: params.temperature,
                };
                let (root_dist, root_view) = match &carried_logits {
                    // Committed root: its successor logits are in hand.
                    Some(l0) => (policy_dist(kind, l0, params.temperature)?, Vec::new()),
                    // Pending root: scratch-forward it (uncounted).
                    None => proposer.advance(&Vec::new(), root_token, root_pos)?,
                };
                build_tree(
                    &mut proposer,
                    root_token,
                    root_pos + 1,
                    root_dist,
                    root_view,
                    &params.beam_widths,
                    params.temperature,
                    &mut rng,
                )?
            }
        };

        // One batched verification forward over (pending plus) the tree.
        let (spec_tokens, spec_positions, _) = linearize(&tree);
        let mask = build_tree_mask(&tree)?;
        let (all_logits, spec_kv) = if pending {
            let mut toks = Vec::with_capacity(spec_tokens.len() + 1);
            toks.push(root_token);
            toks.extend_from_slice(&spec_tokens);
            let mut inds = Vec::with_capacity(spec_positions.len() + 1);
            inds.push(root_pos);
            inds.extend_from_slice(&spec_positions);
            forward_spec(target, &toks, &inds, &cache, &mask.with_root_prefix())?
        } else {
            forward_spec(target, &spec_tokens, &spec_positions, &cache, &mask)?
        };
        target_forwards += 1;

        let offset = usize::from(pending);
        let node_logits = &all_logits[offset..];
        let walk_root_logits: &[T] = if pending {
            &all_logits[0]
        } else {
            carried_logits.as_deref().expect("committed root logits")
        };

        let result = if params.temperature == 0.0 {
            verify_greedy(&tree, node_logits, walk_root_logits)?
        } else {
            verify_sampled(&tree, node_logits, walk_root_logits, params.temperature, &mut rng)?
        };

        // Commit the pending root (if any) plus the accepted chain.
        let mut commit_ids: Vec<usize> = Vec::with_capacity(result.accepted_count + 1);
        if pending {
            commit_ids.push(0);
        }
        commit_ids.extend(result.accepted_path.iter().map(|&id| id + offset));
        commit_kv(&mut cache, &spec_kv, &commit_ids)?;

        // The draft window replays the accepted chain; the root was already
        // consumed during drafting and the bonus is consumed next round.
        if let (DraftPolicy::Glide { draft, .. }, Some(wc)) = (policy, wcache.as_mut()) {
            for &id in &result.accepted_path {
                push_token(draft, target, tree.nodes[id].token, tree.nodes[id].position, wc)?;
            }
        }

        for &id in &result.accepted_path {
            tokens.push(tree.nodes[id].token);
        }
        tokens.push(result.bonus_token);
        histogram[result.accepted_count] += 1;

        if params.dump_trees {
            dumps.push(dump_round(&RoundOutcome { tree, result: result.clone() }, target_forwards));
        }

        root_token = result.bonus_token;
        root_pos = cache.next_position();
        carried_logits = None;
    }

    tokens.truncate(params.gen_len);
    let total_tokens = tokens.len();
    Ok(DecodeOutput {
        tokens,
        metrics: finish_metrics(total_tokens, target_forwards, histogram, start),
        tree_dumps: dumps,
    })
}

/// Greedy argmax at temperature zero, otherwise a draw from the softmax.
fn pick_token<T: Real>(logits: &[T], temperature: f64, rng: &mut RngStream) -> Result<Token> {
    if temperature == 0.0 {
        Ok(argmax_tie_low(logits)? as Token)
    } else {
        let p = target_dist(logits, temperature)?;
        Ok(sample_index(&p, rng.uniform())? as Token)
    }
}

fn finish_metrics(
    total_tokens: usize,
    target_forwards: usize,
    accept_histogram: Vec<u64>,
    start: Instant,
) -> DecodeMetrics {
    let tau = if target_forwards > 0 {
        total_tokens as f64 / target_forwards as f64
    } else {
        0.0
    };
    DecodeMetrics {
        total_tokens,
        target_forwards,
        tau,
        wall_seconds: start.elapsed().as_secs_f64(),
        accept_histogram,
    }
}

fn dump_round<T: Real>(round: &RoundOutcome<T>, round_index: usize) -> serde_json::Value {
    let accepted_tokens: Vec<Token> = round
        .result
        .accepted_path
        .iter()
        .map(|&id| round.tree.nodes[id].token)
        .collect();
    serde_json::json!({
        "round": round_index,
        "tree": round.tree.dump(),
        "accepted_ids": round.result.accepted_path,
        "accepted_tokens": accepted_tokens,
        "bonus_token": round.result.bonus_token,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::draft::init_draft;
    use crate::model::{init_model, ModelConfig};
    use crate::positions::vanilla_indices;
    use crate::tree::TreeNode;

    fn test_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 24,
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

    fn test_model(seed: u64) -> ModelWeights<f32> {
        let mut rng = RngStream::new(seed, "weights");
        init_model(&test_config(), &mut rng).unwrap()
    }

    fn test_prompt(len: usize) -> (Vec<Token>, Vec<usize>) {
        let mut rng = RngStream::new(17, "prompt");
        let toks = (0..len).map(|_| rng.token(test_config().vocab_size)).collect();
        (toks, vanilla_indices(0, len))
    }

    /// Hand-built chain tree over a 4-token vocab with explicit proposal
    /// distributions; node 0 carries `t0`, node 1 carries `t1` under it.
    fn chain_tree(t0: Token, t1: Token, root_dist: Vec<f64>, d0: Vec<f64>) -> SpeculationTree<f64> {
        SpeculationTree {
            root_token: 0,
            root_pos: 10,
            nodes: vec![
                TreeNode { id: 0, parent: None, depth: 1, token: t0, position: 10, cum_logprob: 0.0, active: true },
                TreeNode { id: 1, parent: Some(0), depth: 2, token: t1, position: 11, cum_logprob: 0.0, active: true },
            ],
            root_dist,
            expand_dists: vec![Some(d0), None],
            active_by_level: vec![vec![0], vec![1]],
        }
    }

    fn onehotish(v: usize, hot: usize) -> Vec<f64> {
        (0..v).map(|i| if i == hot { 50.0 } else { 0.0 }).collect()
    }

    #[test]
    fn greedy_walk_accepts_matches_and_emits_leaf_argmax() {
        let tree = chain_tree(2, 1, vec![0.25; 4], vec![0.25; 4]);
        let node_logits = vec![onehotish(4, 1), onehotish(4, 3)];
        let root_logits = onehotish(4, 2);
        let r = verify_greedy(&tree, &node_logits, &root_logits).unwrap();
        assert_eq!(r.accepted_path, vec![0, 1]);
        assert_eq!(r.accepted_count, 3); // two accepted nodes plus the bonus
        assert_eq!(r.bonus_token, 3);
    }

    #[test]
    fn greedy_walk_rejects_at_root() {
        let tree = chain_tree(2, 1, vec![0.25; 4], vec![0.25; 4]);
        let node_logits = vec![onehotish(4, 1), onehotish(4, 3)];
        let root_logits = onehotish(4, 0); // argmax 0, child carries 2
        let r = verify_greedy(&tree, &node_logits, &root_logits).unwrap();
        assert!(r.accepted_path.is_empty());
        assert_eq!(r.accepted_count, 1); // the bonus always ships
        assert_eq!(r.bonus_token, 0);
    }

    #[test]
    fn greedy_walk_takes_first_matching_child_by_id() {
        // Two depth-1 children with the same token (sampled trees allow
        // duplicates); the walk must descend into the lower id.
        let mut tree = chain_tree(2, 2, vec![0.25; 4], vec![0.25; 4]);
        tree.nodes[1].parent = None;
        tree.nodes[1].depth = 1;
        tree.nodes[1].position = 10;
        tree.expand_dists = vec![None, None];
        let node_logits = vec![onehotish(4, 3), onehotish(4, 0)];
        let r = verify_greedy(&tree, &node_logits, &onehotish(4, 2)).unwrap();
        assert_eq!(r.accepted_path, vec![0]);
        assert_eq!(r.bonus_token, 3); // from node 0, not node 1
    }

    #[test]
    fn sampled_walk_accepts_everything_when_proposal_equals_target() {
        let root_logits = vec![0.3, -0.4, 1.1, 0.0];
        let n0 = vec![0.9, 0.2, -1.0, 0.4];
        let p_root = target_dist(&root_logits, 1.0).unwrap();
        let p0 = target_dist(&n0, 1.0).unwrap();
        // Children must actually be proposable under q; pick the argmaxes.
        let tree = chain_tree(2, 0, p_root, p0);
        let node_logits = vec![n0.clone(), vec![0.0; 4]];
        for seed in 0..20 {
            let mut rng = RngStream::new(seed, "sampling");
            let r = verify_sampled(&tree, &node_logits, &root_logits, 1.0, &mut rng).unwrap();
            assert_eq!(r.accepted_path, vec![0, 1], "seed {seed}");
            assert_eq!(r.accepted_count, 3, "seed {seed}");
        }
    }

    #[test]
    fn sampled_walk_rejects_disjoint_proposal_and_bonuses_from_residual() {
        // q is (almost) one-hot on 1, p one-hot on 3: always reject, and
        // the residual renormalizes to p, so the bonus must be 3.
        let q = vec![1e-9, 1.0 - 3e-9, 1e-9, 1e-9];
        let tree = chain_tree(1, 0, q, vec![0.25; 4]);
        let node_logits = vec![vec![0.0; 4], vec![0.0; 4]];
        let root_logits = onehotish(4, 3);
        for seed in 0..20 {
            let mut rng = RngStream::new(seed, "sampling");
            let r = verify_sampled(&tree, &node_logits, &root_logits, 1.0, &mut rng).unwrap();
            assert!(r.accepted_path.is_empty(), "seed {seed}");
            assert_eq!(r.accepted_count, 1, "seed {seed}");
            assert_eq!(r.bonus_token, 3, "seed {seed}");
        }
    }

    #[test]
    fn sampled_walk_emits_the_target_marginal() {
        // Single proposed node drawn from a mismatched q; over many seeds
        // the emitted first token (accepted or bonus) must follow p.
        let root_logits = vec![(0.55_f64).ln(), (0.25_f64).ln(), (0.15_f64).ln(), (0.05_f64).ln()];
        let p = target_dist(&root_logits, 1.0).unwrap();
        let q = vec![0.1, 0.2, 0.3, 0.4];
        let trials = 40_000;
        let mut counts = [0u64; 4];
        let mut accepts = 0u64;
        for seed in 0..trials {
            let mut rng = RngStream::new(seed, "sampling");
            // Re-draw the proposed child from q with the same stream the
            // verifier uses, as the tree builder would.
            let c = sample_index(&q, rng.uniform()).unwrap();
            let tree = chain_tree(c as Token, 0, q.clone(), vec![0.25; 4]);
            let mut t = tree;
            t.nodes.truncate(1);
            t.expand_dists.truncate(1);
            t.active_by_level.truncate(1);
            let r = verify_sampled(&t, &[vec![0.0; 4]], &root_logits, 1.0, &mut rng).unwrap();
            let emitted = if r.accepted_path.len() == 1 {
                accepts += 1;
                t.nodes[0].token as usize
            } else {
                r.bonus_token as usize
            };
            counts[emitted] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(&p)
            .map(|(&c, &pi)| (c as f64 / trials as f64 - pi).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.02, "tv {tv}");
        // Expected accept rate: sum over tokens of min(p, q).
        let want: f64 = p.iter().zip(&q).map(|(&a, &b)| a.min(b)).sum();
        let got = accepts as f64 / trials as f64;
        assert!((got - want).abs() < 0.02, "accept rate {got} vs {want}");
    }

    #[test]
    fn tiny_temperature_reproduces_greedy_decisions() {
        // At T -> 0 the target softmax collapses onto the argmax, so the
        // stochastic walk must accept and bonus exactly like the greedy one.
        fn randlogits(rng: &mut RngStream, spread: f64) -> Vec<f64> {
            (0..6).map(|_| rng.normal() * spread).collect()
        }
        let mut rng = RngStream::new(99, "weights");
        for case in 0..1000 {
            let root_dist = proposal_probs(&randlogits(&mut rng, 2.0), 1.0).unwrap();
            let d0 = proposal_probs(&randlogits(&mut rng, 2.0), 1.0).unwrap();
            let pick = |dist: &[f64], u: f64| sample_index(dist, u).unwrap() as Token;
            let (u0, u1, u2) = (rng.uniform(), rng.uniform(), rng.uniform());
            let tree = SpeculationTree {
                root_token: 0,
                root_pos: 5,
                nodes: vec![
                    TreeNode { id: 0, parent: None, depth: 1, token: pick(&root_dist, u0), position: 5, cum_logprob: 0.0, active: true },
                    TreeNode { id: 1, parent: None, depth: 1, token: pick(&root_dist, u1), position: 5, cum_logprob: 0.0, active: true },
                    TreeNode { id: 2, parent: Some(0), depth: 2, token: pick(&d0, u2), position: 6, cum_logprob: 0.0, active: true },
                ],
                root_dist,
                expand_dists: vec![Some(d0), None, None],
                active_by_level: vec![vec![0, 1], vec![2]],
            };
            let node_logits: Vec<Vec<f64>> = (0..3).map(|_| randlogits(&mut rng, 3.0)).collect();
            let root_logits = randlogits(&mut rng, 3.0);
            let greedy = verify_greedy(&tree, &node_logits, &root_logits).unwrap();
            let mut vrng = RngStream::new(case, "sampling");
            let cold = verify_sampled(&tree, &node_logits, &root_logits, 1e-6, &mut vrng).unwrap();
            assert_eq!(cold.accepted_path, greedy.accepted_path, "case {case}");
            assert_eq!(cold.bonus_token, greedy.bonus_token, "case {case}");
        }
    }

    #[test]
    fn noisy_dist_is_a_proper_mixture() {
        let logits = vec![0.1_f64, 2.0, -0.3];
        let m = noisy_dist(&logits, 0.8).unwrap();
        assert!((m[1] - 0.8).abs() < 1e-12);
        assert!((m[0] - 0.1).abs() < 1e-12 && (m[2] - 0.1).abs() < 1e-12);
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(noisy_dist(&logits, 1.5).is_err());
        assert!(noisy_dist(&[1.0_f64], 0.5).is_err());
    }

    fn params(mode: DecodeMode, widths: Vec<usize>, gen: usize, temp: f64, seed: u64) -> DecodeParams {
        DecodeParams {
            gen_len: gen,
            mode,
            beam_widths: widths,
            temperature: temp,
            seed,
            dump_trees: false,
        }
    }

    #[test]
    fn vanilla_greedy_matches_manual_argmax_steps() {
        let w = test_model(1);
        let (prompt, inds) = test_prompt(6);
        let out = decode_loop(
            &w,
            &DraftPolicy::Oracle, // ignored by vanilla
            &prompt,
            &inds,
            &params(DecodeMode::Vanilla, vec![], 6, 0.0, 0),
        )
        .unwrap();

        let (mut logits, mut cache) = prefill(&w, &prompt, &inds).unwrap();
        let mut expect = Vec::new();
        for _ in 0..6 {
            let t = argmax_tie_low(&logits).unwrap() as Token;
            expect.push(t);
            let pos = cache.next_position();
            let (lg, kv) = forward_spec(&w, &[t], &[pos], &cache, &TreeMask::single()).unwrap();
            commit_kv(&mut cache, &kv, &[0]).unwrap();
            logits = lg.into_iter().next().unwrap();
        }
        assert_eq!(out.tokens, expect);
        assert_eq!(out.metrics.total_tokens, 5);
        assert_eq!(out.metrics.target_forwards, 5);
        assert_eq!(out.metrics.tau, 1.0);
        assert!(out.metrics.accept_histogram.is_empty());
    }

    #[test]
    fn oracle_chain_reproduces_vanilla_greedy_with_exact_tau() {
        let w = test_model(2);
        let (prompt, inds) = test_prompt(5);
        let vanilla = decode_loop(
            &w, &DraftPolicy::Oracle, &prompt, &inds,
            &params(DecodeMode::Vanilla, vec![], 21, 0.0, 0),
        )
        .unwrap();
        let chain = decode_loop(
            &w, &DraftPolicy::Oracle, &prompt, &inds,
            &params(DecodeMode::Chain, vec![1, 1], 21, 0.0, 0),
        )
        .unwrap();
        assert_eq!(chain.tokens, vanilla.tokens);
        // Every round emits gamma + 1 = 3 tokens; 21 tokens = 7 rounds.
        assert_eq!(chain.metrics.target_forwards, 7);
        assert_eq!(chain.metrics.tau, 3.0);
        assert_eq!(chain.metrics.accept_histogram[3], 7);
        assert_eq!(chain.metrics.accept_histogram[..3], [0, 0, 0]);
    }

    #[test]
    fn noisy_chain_is_still_lossless_under_greedy_verification() {
        let w = test_model(3);
        let (prompt, inds) = test_prompt(5);
        let vanilla = decode_loop(
            &w, &DraftPolicy::Oracle, &prompt, &inds,
            &params(DecodeMode::Vanilla, vec![], 24, 0.0, 0),
        )
        .unwrap();
        let noisy = decode_loop(
            &w, &DraftPolicy::Noisy(0.6), &prompt, &inds,
            &params(DecodeMode::Chain, vec![1, 1, 1], 24, 0.0, 9),
        )
        .unwrap();
        assert_eq!(noisy.tokens, vanilla.tokens);
        // A 0.6 drafter must sometimes miss; tau stays below gamma + 1.
        assert!(noisy.metrics.tau < 4.0);
        assert!(noisy.metrics.tau >= 1.0);
    }

    #[test]
    fn glide_tree_is_lossless_under_greedy_verification() {
        let w = test_model(4);
        let mut drng = RngStream::new(4, "draft-weights");
        let draft = init_draft(&test_config(), &mut drng).unwrap();
        let (prompt, inds) = test_prompt(6);
        let vanilla = decode_loop(
            &w, &DraftPolicy::Oracle, &prompt, &inds,
            &params(DecodeMode::Vanilla, vec![], 16, 0.0, 0),
        )
        .unwrap();
        let glide = decode_loop(
            &w,
            &DraftPolicy::Glide { draft: &draft, cross_layer: None },
            &prompt,
            &inds,
            &params(DecodeMode::Tree, vec![2, 2], 16, 0.0, 0),
        )
        .unwrap();
        assert_eq!(glide.tokens, vanilla.tokens);
        assert!(glide.metrics.tau >= 1.0);
    }

    #[test]
    fn stochastic_runs_replay_by_seed_and_vary_across_seeds() {
        let w = test_model(5);
        let mut drng = RngStream::new(5, "draft-weights");
        let draft = init_draft(&test_config(), &mut drng).unwrap();
        let (prompt, inds) = test_prompt(4);
        let run = |seed| {
            decode_loop(
                &w,
                &DraftPolicy::Glide { draft: &draft, cross_layer: None },
                &prompt,
                &inds,
                &params(DecodeMode::Tree, vec![2, 2], 12, 0.8, seed),
            )
            .unwrap()
        };
        let a = run(11);
        let b = run(11);
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.metrics.total_tokens, b.metrics.total_tokens);
        assert_eq!(a.metrics.target_forwards, b.metrics.target_forwards);
        let c = run(12);
        assert!(a.tokens != c.tokens || a.metrics.target_forwards != c.metrics.target_forwards);
    }

    #[test]
    fn stochastic_oracle_accepts_every_speculated_token() {
        let w = test_model(6);
        let (prompt, inds) = test_prompt(4);
        let out = decode_loop(
            &w, &DraftPolicy::Oracle, &prompt, &inds,
            &params(DecodeMode::Chain, vec![1, 1], 18, 1.0, 3),
        )
        .unwrap();
        // p == q makes every acceptance ratio exactly one.
        assert_eq!(out.metrics.tau, 3.0);
        assert_eq!(out.metrics.target_forwards, 6);
    }

    #[test]
    fn tree_dumps_cover_every_round() {
        let w = test_model(7);
        let (prompt, inds) = test_prompt(4);
        let mut p = params(DecodeMode::Chain, vec![1, 1], 9, 0.0, 0);
        p.dump_trees = true;
        let out = decode_loop(&w, &DraftPolicy::Oracle, &prompt, &inds, &p).unwrap();
        assert_eq!(out.tree_dumps.len(), out.metrics.target_forwards);
        let first = &out.tree_dumps[0];
        assert!(first.get("tree").and_then(|t| t.get("nodes")).is_some());
        assert!(first.get("bonus_token").is_some());
    }

    #[test]
    fn gen_len_one_works_in_every_mode() {
        let w = test_model(8);
        let (prompt, inds) = test_prompt(3);
        for (mode, widths) in [
            (DecodeMode::Vanilla, vec![]),
            (DecodeMode::Chain, vec![1, 1]),
            (DecodeMode::Tree, vec![2, 2]),
        ] {
            let out = decode_loop(
                &w, &DraftPolicy::Oracle, &prompt, &inds,
                &params(mode, widths, 1, 0.0, 0),
            )
            .unwrap();
            assert_eq!(out.tokens.len(), 1);
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        let w = test_model(9);
        let (prompt, inds) = test_prompt(3);
        let bad_gen = decode_loop(
            &w, &DraftPolicy::Oracle, &prompt, &inds,
            &params(DecodeMode::Vanilla, vec![], 0, 0.0, 0),
        );
        assert!(bad_gen.is_err());
        let bad_chain = decode_loop(
            &w, &DraftPolicy::Oracle, &prompt, &inds,
            &params(DecodeMode::Chain, vec![2, 1], 4, 0.0, 0),
        );
        assert!(bad_chain.is_err());
        let bad_hit = decode_loop(
            &w, &DraftPolicy::Noisy(1.5), &prompt, &inds,
            &params(DecodeMode::Chain, vec![1], 4, 0.0, 0),
        );
        assert!(bad_hit.is_err());
        let bad_temp = decode_loop(
            &w, &DraftPolicy::Oracle, &prompt, &inds,
            &params(DecodeMode::Vanilla, vec![], 4, -0.5, 0),
        );
        assert!(bad_temp.is_err());
    }
}
