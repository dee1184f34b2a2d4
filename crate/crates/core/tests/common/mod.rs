#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use trajcurate::axtree::{find_target, parse_state, LinearizedState};
use trajcurate::pipeline::{prune_trajectory, PipelineConfig};
use trajcurate::pruning::{
    offset_window, prune_by_bid, prune_non_node, prune_offset, prune_target_centered, target_window, PruneConfig,
};
use trajcurate::similarity::OverlapBackend;
use trajcurate::trajectory::{load_trajectories, CuratedStep, ReasoningOrigin, Trajectory};

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn sample_path() -> PathBuf {
    crate_dir().join("data/sample_trajectories.jsonl")
}

pub fn golden_dir() -> PathBuf {
    crate_dir().join("tests/golden")
}

pub fn sample() -> Vec<Trajectory> {
    load_trajectories(&sample_path(), None).expect("bundled sample loads")
}

pub fn config_in(dir: &Path) -> PipelineConfig {
    PipelineConfig::new(sample_path(), dir.join("curated.jsonl"))
}

/// Steps used for the frozen prompt files: a node-grounded step with history
/// and a non-node step, both pruned with the default config.
pub fn golden_steps() -> Vec<(String, CuratedStep)> {
    let trajs = sample();
    [("sample-02", 3usize, "fill"), ("sample-01", 2, "scroll")]
        .iter()
        .map(|&(id, index, action)| {
            let t = trajs.iter().find(|t| t.id == id).expect("sample trajectory");
            let pruned = prune_trajectory(t, &PruneConfig::default(), &OverlapBackend).expect("prunes");
            let pos = t.steps.iter().position(|s| s.index == index).expect("step");
            let s = &t.steps[pos];
            assert_eq!(s.action.name, action, "sample corpus changed");
            let step = CuratedStep {
                trajectory_id: t.id.clone(),
                index: s.index,
                goal: t.goal.clone(),
                history: s.history.clone(),
                state_pruned: pruned[pos].text.clone(),
                action: s.action.clone(),
                reasoning: s.reasoning.clone(),
                reasoning_origin: ReasoningOrigin::Original,
            };
            (format!("{id}_{index}"), step)
        })
        .collect()
}

fn is_subsequence(kept: &[&str], source: &[&str]) -> bool {
    let mut it = source.iter();
    kept.iter().all(|k| it.any(|s| s == k))
}

/// Checks the pruning invariants for one `(state, k*, w, o)` tuple and
/// returns a description of every violation.
pub fn pruning_violations(state: &LinearizedState, target: usize, w: usize, o: usize) -> Vec<String> {
    let mut bad = Vec::new();
    let k = state.indexed_count;
    let tag = format!("K={k} k*={target} w={w} o={o}");
    let tc = prune_target_centered(state, target, w).expect("target in range");
    let kept: BTreeSet<usize> = tc.report.kept_positions.iter().copied().collect();
    if !kept.contains(&target) {
        bad.push(format!("{tag}: target-centered dropped the target"));
    }
    if kept.len() > 2 * w + 1 {
        bad.push(format!("{tag}: target-centered kept {} > 2w+1", kept.len()));
    }
    let wider = target_window(target, w + 1, k);
    if !kept.is_subset(&wider) {
        bad.push(format!("{tag}: window not monotone in w"));
    }
    let off = prune_offset(state, target, w, o).expect("target in range");
    if !off.report.kept_positions.contains(&target) {
        bad.push(format!("{tag}: offset dropped the target"));
    }
    if off.report.kept_positions.len() > 2 * (w + 1) + 1 {
        bad.push(format!(
            "{tag}: offset kept {} > 2(w+1)+1",
            off.report.kept_positions.len()
        ));
    }
    let zero = prune_offset(state, target, w, 0).expect("target in range");
    if zero.text != tc.text
        || zero.report.kept_positions != tc.report.kept_positions
        || offset_window(target, w, 0, k) != target_window(target, w, k)
    {
        bad.push(format!("{tag}: o=0 differs from target-centered"));
    }
    let bid = prune_by_bid(state, target).expect("target in range");
    if bid.report.kept_positions != (1..=target).collect::<Vec<_>>() {
        bad.push(format!("{tag}: by-bid is not the prefix 1..k*"));
    }
    let source: Vec<&str> = state.source_text.lines().filter(|l| !l.trim().is_empty()).collect();
    for (name, p) in [("target-centered", &tc), ("offset", &off), ("by-bid", &bid)] {
        let lines: Vec<&str> = p.text.lines().collect();
        if !is_subsequence(&lines, &source) {
            bad.push(format!("{tag}: {name} reordered lines"));
        }
        if p.report.tokens_after > p.report.tokens_before {
            bad.push(format!("{tag}: {name} grew the state"));
        }
        let sorted = p.report.kept_positions.windows(2).all(|x| x[0] < x[1]);
        if !sorted {
            bad.push(format!("{tag}: {name} positions out of order"));
        }
    }
    // Re-prune the pruned text with the target recomputed from its bid.
    let bid_of_target = state.node_at(target).and_then(|n| n.bid.clone()).expect("indexed");
    for (name, p) in [("target-centered", &tc), ("by-bid", &bid)] {
        let again_state = parse_state(&p.text).expect("pruned text parses");
        let t2 = again_state.position_of_bid(&bid_of_target).expect("target survives");
        let again = if name == "by-bid" {
            prune_by_bid(&again_state, t2).unwrap()
        } else {
            prune_target_centered(&again_state, t2, w).unwrap()
        };
        if again.text != p.text {
            bad.push(format!("{tag}: {name} not idempotent"));
        }
    }
    let prefix = prune_non_node(state, 2 * w + 1);
    if prefix.text != prune_non_node(&parse_state(&prefix.text).unwrap(), 2 * w + 1).text {
        bad.push(format!("{tag}: prefix not idempotent"));
    }
    bad
}

/// Runs [`pruning_violations`] on every node-grounded step of the sample
/// corpus at the default window, returning (tuples checked, violations).
pub fn sample_pruning_violations() -> (usize, Vec<String>) {
    let mut checked = 0;
    let mut bad = Vec::new();
    for t in sample() {
        for s in &t.steps {
            let state = parse_state(&s.state_raw).expect("sample state parses");
            if let Ok(Some(target)) = find_target(&state, &s.action) {
                for (w, o) in [(60, 0), (60, 5), (10, 20), (0, 3)] {
                    checked += 1;
                    bad.extend(pruning_violations(&state, target, w, o));
                }
            }
        }
    }
    (checked, bad)
}

/// Flat synthetic state with `k` indexed nodes, each owning one static line.
pub fn flat_state(k: usize) -> LinearizedState {
    let text: Vec<String> = (1..=k)
        .map(|i| format!("[n{i}] link 'item {i}'\n\tStaticText 'label {i}'"))
        .collect();
    parse_state(&text.join("\n")).expect("flat state parses")
}
