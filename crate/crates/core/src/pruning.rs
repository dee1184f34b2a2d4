//! State pruners.
//!
//! All windows are measured over indexed positions `1..=K` of a parsed
//! state. Static lines (no bid) are not counted, but they are emitted together
//! with the indexed node that owns them (see [`LinearizedState::owners`]), so
//! labels such as `StaticText` children survive alongside their parent.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::axtree::{count_tokens, find_target, parse_state, AxTreeError, LinearizedState};
use crate::similarity::{SimilarityError, SimilarityProvider};
use crate::trajectory::Action;

pub const DEFAULT_WINDOW: usize = 60;
pub const DEFAULT_NON_NODE_WINDOW: usize = 120;
pub const DEFAULT_SEMANTIC_K: usize = 80;

#[derive(Debug, thiserror::Error)]
pub enum PruneError {
    #[error("target position {target} outside 1..={len}")]
    TargetOutOfRange { target: usize, len: usize },
    #[error("semantic budget must be at least 1")]
    ZeroSemanticBudget,
    #[error(transparent)]
    AxTree(#[from] AxTreeError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneStrategy {
    TargetCentered,
    TargetCenteredOffset,
    PruneByBid,
    SemanticTopK,
    UnionTargetSemantic,
    PrefixOnly,
    /// Leave states untouched.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub strategy: PruneStrategy,
    pub window: usize,
    pub offset: usize,
    pub non_node_window: usize,
    pub semantic_k: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            strategy: PruneStrategy::TargetCentered,
            window: DEFAULT_WINDOW,
            offset: 0,
            non_node_window: DEFAULT_NON_NODE_WINDOW,
            semantic_k: DEFAULT_SEMANTIC_K,
        }
    }
}

impl PruneConfig {
    /// Prefix length used for non-node actions.
    pub fn non_node_budget(&self) -> usize {
        2 * self.non_node_window + 1
    }

    /// Prefix length used when a node-grounded target cannot be found.
    pub fn node_budget(&self) -> usize {
        2 * self.window + 1
    }
}

/// What was actually applied to one state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppliedPruner {
    TargetCentered,
    Offset,
    ByBid,
    Semantic,
    Union,
    Prefix,
    /// Node-grounded action whose target bid was absent from the state.
    MissingTargetPrefix,
    Unpruned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneReport {
    pub kept_positions: Vec<usize>,
    pub tokens_before: usize,
    pub tokens_after: usize,
    pub applied: AppliedPruner,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pruned {
    pub text: String,
    pub report: PruneReport,
}

fn check_target(state: &LinearizedState, target: usize) -> Result<(), PruneError> {
    if target == 0 || target > state.indexed_count {
        return Err(PruneError::TargetOutOfRange {
            target,
            len: state.indexed_count,
        });
    }
    Ok(())
}

fn clamp_interval(lo: i64, hi: i64, len: usize) -> std::ops::RangeInclusive<usize> {
    let lo = lo.max(1);
    let hi = hi.min(len as i64);
    if lo > hi {
        #[allow(clippy::reversed_empty_ranges)]
        return 1..=0;
    }
    lo as usize..=hi as usize
}

/// Emits the kept positions (and the static lines they own) in source order.
pub fn render(state: &LinearizedState, kept: &BTreeSet<usize>) -> String {
    let owners = state.owners();
    let lines: Vec<&str> = state
        .nodes
        .iter()
        .zip(owners)
        .filter(|(_, owner)| owner.is_some_and(|o| kept.contains(&o)))
        .map(|(n, _)| n.raw_line.as_str())
        .collect();
    lines.join("\n")
}

fn finish(state: &LinearizedState, kept: BTreeSet<usize>, applied: AppliedPruner) -> Pruned {
    let text = render(state, &kept);
    Pruned {
        report: PruneReport {
            tokens_before: state.source_tokens,
            tokens_after: count_tokens(&text),
            kept_positions: kept.into_iter().collect(),
            applied,
        },
        text,
    }
}

pub fn target_window(target: usize, window: usize, len: usize) -> BTreeSet<usize> {
    let t = target as i64;
    let w = window as i64;
    clamp_interval(t - w, t + w, len).collect()
}

pub fn offset_window(target: usize, window: usize, offset: usize, len: usize) -> BTreeSet<usize> {
    let (t, w, o) = (target as i64, window as i64, offset as i64);
    let mut kept: BTreeSet<usize> = clamp_interval(t - o - w, t - o, len).collect();
    kept.extend(clamp_interval(t, t, len));
    kept.extend(clamp_interval(t + o, t + o + w, len));
    kept
}

/// Keeps `[target - w, target + w] ∩ 1..=K`.
pub fn prune_target_centered(state: &LinearizedState, target: usize, window: usize) -> Result<Pruned, PruneError> {
    check_target(state, target)?;
    let kept = target_window(target, window, state.indexed_count);
    Ok(finish(state, kept, AppliedPruner::TargetCentered))
}

/// Keeps the target plus two arms of `w + 1` positions shifted `offset` away
/// from it. `offset = 0` reproduces [`prune_target_centered`].
pub fn prune_offset(
    state: &LinearizedState,
    target: usize,
    window: usize,
    offset: usize,
) -> Result<Pruned, PruneError> {
    check_target(state, target)?;
    let kept = offset_window(target, window, offset, state.indexed_count);
    Ok(finish(state, kept, AppliedPruner::Offset))
}

/// Keeps the prefix `1..=target`.
pub fn prune_by_bid(state: &LinearizedState, target: usize) -> Result<Pruned, PruneError> {
    check_target(state, target)?;
    Ok(finish(state, (1..=target).collect(), AppliedPruner::ByBid))
}

/// Keeps the prefix `1..=min(budget, K)`.
pub fn prune_non_node(state: &LinearizedState, budget: usize) -> Pruned {
    let kept = (1..=budget.min(state.indexed_count)).collect();
    finish(state, kept, AppliedPruner::Prefix)
}

/// Indexed leaves (positions) and, for each, its text joined with the names
/// of its ancestors, nearest first. A node is a leaf when the next indexed
/// node is not deeper than it.
pub fn leaf_representations(state: &LinearizedState) -> Vec<(usize, String)> {
    let indexed: Vec<_> = state.indexed_offsets().iter().map(|&i| &state.nodes[i]).collect();
    let mut stack: Vec<(usize, &str)> = Vec::new();
    let mut out = Vec::new();
    for (i, node) in indexed.iter().enumerate() {
        while stack.last().is_some_and(|&(d, _)| d >= node.depth) {
            stack.pop();
        }
        let own = if node.name.is_empty() {
            node.role.as_str()
        } else {
            node.name.as_str()
        };
        let is_leaf = indexed.get(i + 1).is_none_or(|next| next.depth <= node.depth);
        if is_leaf {
            let mut rep = own.to_string();
            for (_, anc) in stack.iter().rev().filter(|(_, a)| !a.is_empty()) {
                rep.push(' ');
                rep.push_str(anc);
            }
            out.push((node.position.expect("indexed node"), rep));
        }
        stack.push((node.depth, own));
    }
    out
}

fn semantic_set(
    state: &LinearizedState,
    query: &str,
    k: usize,
    sim: &dyn SimilarityProvider,
) -> Result<BTreeSet<usize>, PruneError> {
    if k == 0 {
        return Err(PruneError::ZeroSemanticBudget);
    }
    let leaves = leaf_representations(state);
    if leaves.len() <= k {
        return Ok(leaves.into_iter().map(|(p, _)| p).collect());
    }
    let pairs: Vec<(&str, &str)> = leaves.iter().map(|(_, rep)| (query, rep.as_str())).collect();
    let scores = sim.sim_many(&pairs)?;
    let mut ranked: Vec<(usize, f64)> = leaves.iter().map(|(p, _)| *p).zip(scores).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(k).map(|(p, _)| p).collect())
}

/// Keeps the `k` leaves most similar to `query`, in document order. Ties go to
/// the earlier position.
pub fn prune_semantic(
    state: &LinearizedState,
    query: &str,
    k: usize,
    sim: &dyn SimilarityProvider,
) -> Result<Pruned, PruneError> {
    let kept = semantic_set(state, query, k, sim)?;
    Ok(finish(state, kept, AppliedPruner::Semantic))
}

/// Union of the target-centered window and the semantic selection.
pub fn prune_union(
    state: &LinearizedState,
    target: usize,
    window: usize,
    query: &str,
    k: usize,
    sim: &dyn SimilarityProvider,
) -> Result<Pruned, PruneError> {
    check_target(state, target)?;
    let mut kept = target_window(target, window, state.indexed_count);
    kept.extend(semantic_set(state, query, k, sim)?);
    Ok(finish(state, kept, AppliedPruner::Union))
}

/// Query used by the semantic pruners: the goal followed by the gold answer.
pub fn semantic_query(goal: &str, answer: &str) -> String {
    format!("{goal}\n{answer}")
}

/// Prunes one step's state according to `config`.
///
/// Non-node actions keep a prefix of `2 * non_node_window + 1` positions. A
/// node-grounded action whose bid is missing from the state falls back to a
/// prefix of `2 * window + 1` and is reported as
/// [`AppliedPruner::MissingTargetPrefix`].
pub fn prune_step(
    state_raw: &str,
    action: &Action,
    query: &str,
    config: &PruneConfig,
    sim: &dyn SimilarityProvider,
) -> Result<Pruned, PruneError> {
    let state = parse_state(state_raw)?;
    if config.strategy == PruneStrategy::None {
        let tokens = count_tokens(state_raw);
        return Ok(Pruned {
            text: state_raw.to_string(),
            report: PruneReport {
                kept_positions: (1..=state.indexed_count).collect(),
                tokens_before: tokens,
                tokens_after: tokens,
                applied: AppliedPruner::Unpruned,
            },
        });
    }
    if config.strategy == PruneStrategy::PrefixOnly {
        return Ok(prune_non_node(&state, config.non_node_budget()));
    }
    let target = match find_target(&state, action) {
        Ok(Some(t)) => t,
        Ok(None) => return Ok(prune_non_node(&state, config.non_node_budget())),
        Err(AxTreeError::MissingTarget(_)) => {
            let mut p = prune_non_node(&state, config.node_budget());
            p.report.applied = AppliedPruner::MissingTargetPrefix;
            return Ok(p);
        }
        Err(e) => return Err(e.into()),
    };
    match config.strategy {
        PruneStrategy::TargetCentered => prune_target_centered(&state, target, config.window),
        PruneStrategy::TargetCenteredOffset => prune_offset(&state, target, config.window, config.offset),
        PruneStrategy::PruneByBid => prune_by_bid(&state, target),
        PruneStrategy::SemanticTopK => prune_semantic(&state, query, config.semantic_k, sim),
        PruneStrategy::UnionTargetSemantic => prune_union(&state, target, config.window, query, config.semantic_k, sim),
        PruneStrategy::PrefixOnly | PruneStrategy::None => unreachable!("handled above"),
    }
}
