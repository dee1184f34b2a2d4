//! Fixed-budget step selection.
//!
//! The objective for an index set `J` is
//!
//! ```text
//! f(J) = Σ_{j ∈ J} phi(j) + λ · Σ_{i < j ∈ J} D(i, j)
//! ```
//!
//! [`select_greedy`] seeds with the best pair and then adds the index with the
//! largest marginal gain `phi(k) + λ · Σ_{i ∈ J} D(k, i)`, keeping per-candidate
//! running sums so each round costs `O(T)`. [`select_exact`] enumerates every
//! subset of the budget size and is the reference the greedy result is
//! measured against in [`approximation_study`].
//!
//! Ties are broken toward the lexicographically smallest pair, index or
//! subset, with exact float comparison.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::par::{map_ordered, map_range, Execution};
use crate::similarity::{ScoreCache, SimilarityError};

pub const DEFAULT_BUDGET: usize = 3;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_ENUMERATION_GUARD: u128 = 1_000_000;

#[derive(Debug, thiserror::Error)]
pub enum SelectionError {
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
    #[error("index {index} out of range for trajectory of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("exact enumeration of {count} subsets exceeds the guard of {limit}")]
    EnumerationGuard { count: u128, limit: u128 },
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "name")]
pub enum SelectionMethod {
    Greedy,
    Exact,
    Random { seed: u64 },
    ImportanceOnly,
    DiversityOnly,
}

impl SelectionMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            SelectionMethod::Greedy => "greedy",
            SelectionMethod::Exact => "exact",
            SelectionMethod::Random { .. } => "random",
            SelectionMethod::ImportanceOnly => "importance_only",
            SelectionMethod::DiversityOnly => "diversity_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub budget: usize,
    pub lambda: f64,
    pub method: SelectionMethod,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            budget: DEFAULT_BUDGET,
            lambda: DEFAULT_LAMBDA,
            method: SelectionMethod::Greedy,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        if self.budget == 0 {
            return Err(SelectionError::InvalidConfig("budget must be at least 1".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(SelectionError::InvalidConfig(format!(
                "lambda must be a non-negative number, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// One addition made by a selector and the gain it contributed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainStep {
    pub index: usize,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Selected indices, strictly increasing.
    pub indices: Vec<usize>,
    pub objective_value: f64,
    /// Additions in the order they were made. For the greedy selector the
    /// seed pair appears as two entries whose gains sum to the pair's value,
    /// so the gains always sum to the objective.
    pub gain_trace: Vec<GainStep>,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluated_subsets: Option<u128>,
}

/// Objective value of `indices` (order and duplicates ignored).
pub fn objective(indices: &[usize], cache: &ScoreCache, lambda: f64) -> Result<f64, SelectionError> {
    let n = cache.len();
    let mut idx = indices.to_vec();
    idx.sort_unstable();
    idx.dedup();
    if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
        return Err(SelectionError::IndexOutOfRange { index: bad, len: n });
    }
    let phi = cache.phi();
    let unary: f64 = idx.iter().map(|&i| phi[i]).sum();
    let mut pairs = 0.0;
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            pairs += cache.diversity(i, j)?;
        }
    }
    Ok(unary + lambda * pairs)
}

/// Same summation order as [`objective`], over a dense matrix. `idx` must be
/// sorted.
fn dense_value(phi: &[f64], d: &[f64], n: usize, lambda: f64, idx: &[usize]) -> f64 {
    let unary: f64 = idx.iter().map(|&i| phi[i]).sum();
    let mut pairs = 0.0;
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            pairs += d[i * n + j];
        }
    }
    unary + lambda * pairs
}

fn finish(
    cache: &ScoreCache,
    lambda: f64,
    mut indices: Vec<usize>,
    gain_trace: Vec<GainStep>,
    method: &SelectionMethod,
    evaluated_subsets: Option<u128>,
) -> Result<SelectionResult, SelectionError> {
    indices.sort_unstable();
    let objective_value = objective(&indices, cache, lambda)?;
    Ok(SelectionResult {
        indices,
        objective_value,
        gain_trace,
        method: method.tag().to_string(),
        evaluated_subsets,
    })
}

/// Greedy core shared by the full objective and the diversity-only baseline.
/// Returns additions in selection order.
fn greedy_trace(
    cache: &ScoreCache,
    phi: &dyn Fn(usize) -> f64,
    budget: usize,
    lambda: f64,
) -> Result<Vec<GainStep>, SelectionError> {
    let n = cache.len();
    if n <= budget {
        let mut trace = Vec::with_capacity(n);
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..j {
                acc += cache.diversity(i, j)?;
            }
            trace.push(GainStep {
                index: j,
                gain: phi(j) + lambda * acc,
            });
        }
        return Ok(trace);
    }
    if budget == 1 {
        let mut best = 0;
        for k in 1..n {
            if phi(k) > phi(best) {
                best = k;
            }
        }
        return Ok(vec![GainStep {
            index: best,
            gain: phi(best),
        }]);
    }

    let mut seed = (0, 1);
    let mut seed_value = f64::NEG_INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            let v = phi(i) + phi(j) + lambda * cache.diversity(i, j)?;
            if v > seed_value {
                seed_value = v;
                seed = (i, j);
            }
        }
    }
    let (i1, i2) = seed;
    let mut trace = vec![
        GainStep {
            index: i1,
            gain: phi(i1),
        },
        GainStep {
            index: i2,
            gain: phi(i2) + lambda * cache.diversity(i1, i2)?,
        },
    ];
    let mut chosen = vec![false; n];
    chosen[i1] = true;
    chosen[i2] = true;
    // Running Σ_{i ∈ J} D(k, i) per candidate.
    let mut acc = vec![0.0; n];
    for k in 0..n {
        if !chosen[k] {
            acc[k] = cache.diversity(k, i1)? + cache.diversity(k, i2)?;
        }
    }
    while trace.len() < budget {
        let mut best: Option<(usize, f64)> = None;
        for k in (0..n).filter(|&k| !chosen[k]) {
            let gain = phi(k) + lambda * acc[k];
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((k, gain));
            }
        }
        let (k, gain) = best.expect("candidates remain while |J| < budget < T");
        chosen[k] = true;
        trace.push(GainStep { index: k, gain });
        for c in 0..n {
            if !chosen[c] {
                acc[c] += cache.diversity(c, k)?;
            }
        }
    }
    Ok(trace)
}

pub fn select_greedy(cache: &ScoreCache, config: &SelectionConfig) -> Result<SelectionResult, SelectionError> {
    config.validate()?;
    let phi = cache.phi();
    let trace = greedy_trace(cache, &|k| phi[k], config.budget, config.lambda)?;
    let indices = trace.iter().map(|g| g.index).collect();
    finish(cache, config.lambda, indices, trace, &SelectionMethod::Greedy, None)
}

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k) as u128;
    let n = n as u128;
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step.
        acc = match acc.checked_mul(n - i) {
            Some(v) => v / (i + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Visits every `k`-subset of `start..n` in lexicographic order, prefixed by
/// `prefix`.
fn for_each_combination(start: usize, n: usize, k: usize, prefix: &[usize], mut visit: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = prefix.to_vec();
    let base = idx.len();
    if k == 0 {
        visit(&idx);
        return;
    }
    if n < start + k {
        return;
    }
    idx.extend(start..start + k);
    loop {
        visit(&idx);
        // Advance the rightmost position that can still move.
        let mut pos = k;
        while pos > 0 {
            let p = base + pos - 1;
            if idx[p] < n - (k - pos) - 1 {
                break;
            }
            pos -= 1;
        }
        if pos == 0 {
            return;
        }
        let p = base + pos - 1;
        idx[p] += 1;
        for q in p + 1..base + k {
            idx[q] = idx[q - 1] + 1;
        }
    }
}

struct ExactSearch {
    best: Vec<usize>,
    count: u128,
}

fn exact_search(phi: &[f64], d: &[f64], budget: usize, lambda: f64, exec: Execution) -> ExactSearch {
    let n = phi.len();
    let k = budget.min(n);
    if k == 0 {
        return ExactSearch { best: vec![], count: 1 };
    }
    // One task per leading index; partitions come back in lexicographic order.
    let partials: Vec<Option<(Vec<usize>, f64)>> = map_range(n, exec, |first| {
        let mut best: Option<(Vec<usize>, f64)> = None;
        for_each_combination(first + 1, n, k - 1, &[first], |idx| {
            let v = dense_value(phi, d, n, lambda, idx);
            if best.as_ref().is_none_or(|(_, b)| v > *b) {
                best = Some((idx.to_vec(), v));
            }
        });
        best
    });
    let mut out: Option<(Vec<usize>, f64)> = None;
    for (idx, v) in partials.into_iter().flatten() {
        if out.as_ref().is_none_or(|(_, b)| v > *b) {
            out = Some((idx, v));
        }
    }
    let (best, _) = out.expect("at least one subset");
    ExactSearch {
        best,
        count: binomial(n, k),
    }
}

/// Exhaustive search over all `C(T, budget)` subsets. Refuses when that count
/// exceeds `max_enumeration`.
pub fn select_exact(
    cache: &ScoreCache,
    config: &SelectionConfig,
    max_enumeration: u128,
    exec: Execution,
) -> Result<SelectionResult, SelectionError> {
    config.validate()?;
    let n = cache.len();
    let count = binomial(n, config.budget.min(n));
    if count > max_enumeration {
        return Err(SelectionError::EnumerationGuard {
            count,
            limit: max_enumeration,
        });
    }
    let d = cache.dense()?;
    let found = exact_search(cache.phi(), &d, config.budget, config.lambda, exec);
    finish(
        cache,
        config.lambda,
        found.best,
        Vec::new(),
        &SelectionMethod::Exact,
        Some(found.count),
    )
}

pub fn select_random(
    cache: &ScoreCache,
    config: &SelectionConfig,
    seed: u64,
) -> Result<SelectionResult, SelectionError> {
    config.validate()?;
    let n = cache.len();
    let indices: Vec<usize> = if n <= config.budget {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample(&mut rng, n, config.budget).into_vec()
    };
    finish(
        cache,
        config.lambda,
        indices,
        Vec::new(),
        &SelectionMethod::Random { seed },
        None,
    )
}

pub fn select_importance_only(cache: &ScoreCache, config: &SelectionConfig) -> Result<SelectionResult, SelectionError> {
    config.validate()?;
    let phi = cache.phi();
    let mut order: Vec<usize> = (0..cache.len()).collect();
    order.sort_by(|&a, &b| phi[b].total_cmp(&phi[a]).then(a.cmp(&b)));
    order.truncate(config.budget);
    let trace = order.iter().map(|&i| GainStep { index: i, gain: phi[i] }).collect();
    finish(
        cache,
        config.lambda,
        order,
        trace,
        &SelectionMethod::ImportanceOnly,
        None,
    )
}

/// Greedy with importance zeroed out. The reported objective still uses the
/// full objective.
pub fn select_diversity_only(cache: &ScoreCache, config: &SelectionConfig) -> Result<SelectionResult, SelectionError> {
    config.validate()?;
    let trace = greedy_trace(cache, &|_| 0.0, config.budget, config.lambda)?;
    let indices = trace.iter().map(|g| g.index).collect();
    finish(
        cache,
        config.lambda,
        indices,
        trace,
        &SelectionMethod::DiversityOnly,
        None,
    )
}

/// Dispatches on `config.method`.
pub fn select(cache: &ScoreCache, config: &SelectionConfig, guard: u128) -> Result<SelectionResult, SelectionError> {
    match config.method {
        SelectionMethod::Greedy => select_greedy(cache, config),
        SelectionMethod::Exact => select_exact(cache, config, guard, Execution::Sequential),
        SelectionMethod::Random { seed } => select_random(cache, config, seed),
        SelectionMethod::ImportanceOnly => select_importance_only(cache, config),
        SelectionMethod::DiversityOnly => select_diversity_only(cache, config),
    }
}

/// Explicit scores for one synthetic selection problem. `d` is dense row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub phi: Vec<f64>,
    pub d: Vec<f64>,
}

impl Instance {
    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    pub fn cache(&self) -> Result<ScoreCache, SelectionError> {
        Ok(ScoreCache::from_dense(self.phi.clone(), &self.d, "synthetic")?)
    }

    /// `T` uniform in `t_min..=t_max`; `phi` and the upper triangle of `D`
    /// i.i.d. uniform on `[0, 1)`, mirrored, zero diagonal.
    pub fn uniform(rng: &mut impl Rng, t_min: usize, t_max: usize) -> Instance {
        let n = rng.gen_range(t_min..=t_max);
        let phi = (0..n).map(|_| rng.gen::<f64>()).collect();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = rng.gen::<f64>();
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        Instance { phi, d }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyParams {
    pub instances: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub seed: u64,
}

/// Instance `i` draws from a ChaCha8 stream `i` under the master seed, so the
/// set is the same however it is generated.
pub fn generate_uniform_instances(params: &StudyParams) -> Vec<Instance> {
    (0..params.instances)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(i as u64);
            Instance::uniform(&mut rng, params.t_min, params.t_max)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    /// Instances evaluated (skipped ones excluded).
    pub instances: usize,
    pub match_rate: f64,
    pub mean_ratio: f64,
    pub std_ratio: f64,
    pub top1pct_rate: f64,
    pub skipped: usize,
}

/// Greedy-vs-exact comparison on one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceOutcome {
    pub greedy: Vec<usize>,
    pub exact: Vec<usize>,
    pub ratio: f64,
    /// Subsets with a strictly higher objective than the greedy one.
    pub strictly_better: u128,
    pub subsets: u128,
}

impl InstanceOutcome {
    pub fn matched(&self) -> bool {
        self.greedy == self.exact
    }

    /// Fewer than 1% of all subsets beat the greedy subset.
    pub fn in_top_percent(&self) -> bool {
        (self.strictly_better as f64) < 0.01 * self.subsets as f64
    }
}

pub fn compare_on_instance(
    instance: &Instance,
    config: &SelectionConfig,
    guard: u128,
) -> Result<InstanceOutcome, SelectionError> {
    let cache = instance.cache()?;
    let greedy_cfg = SelectionConfig {
        method: SelectionMethod::Greedy,
        ..*config
    };
    let greedy = select_greedy(&cache, &greedy_cfg)?;
    let exact = select_exact(&cache, &greedy_cfg, guard, Execution::Sequential)?;
    let n = instance.len();
    let k = config.budget.min(n);
    let g = dense_value(&instance.phi, &instance.d, n, config.lambda, &greedy.indices);
    let mut better = 0u128;
    for_each_combination(0, n, k, &[], |idx| {
        if dense_value(&instance.phi, &instance.d, n, config.lambda, idx) > g {
            better += 1;
        }
    });
    let ratio = if exact.objective_value > 0.0 {
        greedy.objective_value / exact.objective_value
    } else {
        1.0
    };
    Ok(InstanceOutcome {
        greedy: greedy.indices,
        exact: exact.indices,
        ratio,
        strictly_better: better,
        subsets: exact.evaluated_subsets.unwrap_or(0),
    })
}

/// Runs greedy and exact on every instance and summarizes how close greedy
/// gets. Instances beyond the enumeration guard are skipped and counted.
pub fn approximation_study(
    instances: &[Instance],
    config: &SelectionConfig,
    guard: u128,
    exec: Execution,
) -> Result<StudyReport, SelectionError> {
    config.validate()?;
    let outcomes = map_ordered(instances, exec, |inst| compare_on_instance(inst, config, guard));
    let mut done = Vec::with_capacity(outcomes.len());
    let mut skipped = 0;
    for o in outcomes {
        match o {
            Ok(o) => done.push(o),
            Err(SelectionError::EnumerationGuard { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(summarize(&done, skipped))
}

pub fn summarize(outcomes: &[InstanceOutcome], skipped: usize) -> StudyReport {
    let n = outcomes.len();
    if n == 0 {
        return StudyReport {
            instances: 0,
            match_rate: 0.0,
            mean_ratio: 0.0,
            std_ratio: 0.0,
            top1pct_rate: 0.0,
            skipped,
        };
    }
    let nf = n as f64;
    let mean = outcomes.iter().map(|o| o.ratio).sum::<f64>() / nf;
    let var = outcomes.iter().map(|o| (o.ratio - mean).powi(2)).sum::<f64>() / nf;
    StudyReport {
        instances: n,
        match_rate: outcomes.iter().filter(|o| o.matched()).count() as f64 / nf,
        mean_ratio: mean,
        std_ratio: var.sqrt(),
        top1pct_rate: outcomes.iter().filter(|o| o.in_top_percent()).count() as f64 / nf,
        skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn three_point() -> ScoreCache {
        #[rustfmt::skip]
        let d = [
            0.0, 0.1, 0.9,
            0.1, 0.0, 0.9,
            0.9, 0.9, 0.0,
        ];
        ScoreCache::from_dense(vec![0.9, 0.8, 0.1], &d, "test").unwrap()
    }

    fn cfg(budget: usize, lambda: f64) -> SelectionConfig {
        SelectionConfig {
            budget,
            lambda,
            method: SelectionMethod::Greedy,
        }
    }

    /// Independent brute force: every subset via bitmask, lexicographic
    /// tie-break on the sorted index vector.
    fn brute_force(inst: &Instance, budget: usize, lambda: f64) -> (Vec<usize>, f64) {
        let n = inst.len();
        let k = budget.min(n);
        let mut best: Option<(Vec<usize>, f64)> = None;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let mut v = 0.0;
            for &i in &idx {
                v += inst.phi[i];
            }
            let mut p = 0.0;
            for a in 0..idx.len() {
                for b in a + 1..idx.len() {
                    p += inst.d[idx[a] * n + idx[b]];
                }
            }
            v += lambda * p;
            let better = match &best {
                None => true,
                Some((bi, bv)) => v > *bv || (v == *bv && idx < *bi),
            };
            if better {
                best = Some((idx, v));
            }
        }
        best.unwrap()
    }

    #[test]
    fn objective_examples() {
        let c = three_point();
        assert_eq!(objective(&[], &c, 1.0).unwrap(), 0.0);
        assert_eq!(objective(&[2], &c, 1.0).unwrap(), 0.1);
        assert!((objective(&[0, 2], &c, 1.0).unwrap() - 1.9).abs() < 1e-12);
        assert!((objective(&[0, 1], &c, 1.0).unwrap() - 1.8).abs() < 1e-12);
        assert!(matches!(
            objective(&[3], &c, 1.0),
            Err(SelectionError::IndexOutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn greedy_on_three_point_instance() {
        let r = select_greedy(&three_point(), &cfg(2, 1.0)).unwrap();
        assert_eq!(r.indices, vec![0, 2]);
        assert!((r.objective_value - 1.9).abs() < 1e-12);
        let e = select_exact(
            &three_point(),
            &cfg(2, 1.0),
            DEFAULT_ENUMERATION_GUARD,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(e.indices, vec![0, 2]);
        assert_eq!(e.evaluated_subsets, Some(3));
    }

    #[test]
    fn budget_at_least_length_returns_everything() {
        let r = select_greedy(&three_point(), &cfg(3, 1.0)).unwrap();
        assert_eq!(r.indices, vec![0, 1, 2]);
        let r = select_greedy(&three_point(), &cfg(7, 1.0)).unwrap();
        assert_eq!(r.indices, vec![0, 1, 2]);
        let sum: f64 = r.gain_trace.iter().map(|g| g.gain).sum();
        assert!((sum - r.objective_value).abs() < 1e-9);
        let e = select_exact(&three_point(), &cfg(3, 1.0), 10, Execution::Sequential).unwrap();
        assert_eq!(e.indices, vec![0, 1, 2]);
        assert_eq!(e.evaluated_subsets, Some(1));
    }

    #[test]
    fn lambda_zero_picks_top_importance() {
        let n = 4;
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    d[i * n + j] = 0.77;
                }
            }
        }
        let c = ScoreCache::from_dense(vec![0.1, 0.9, 0.5, 0.7], &d, "t").unwrap();
        assert_eq!(select_greedy(&c, &cfg(2, 0.0)).unwrap().indices, vec![1, 3]);
    }

    #[test]
    fn ties_go_to_lowest_indices() {
        let n = 4;
        let d = vec![0.0; n * n];
        let c = ScoreCache::from_dense(vec![0.5; 4], &d, "t").unwrap();
        assert_eq!(select_greedy(&c, &cfg(3, 1.0)).unwrap().indices, vec![0, 1, 2]);
        assert_eq!(
            select_exact(&c, &cfg(3, 1.0), 100, Execution::Parallel)
                .unwrap()
                .indices,
            vec![0, 1, 2]
        );
        assert_eq!(select_greedy(&c, &cfg(1, 1.0)).unwrap().indices, vec![0]);
    }

    #[test]
    fn budget_one_takes_argmax_phi() {
        let r = select_greedy(&three_point(), &cfg(1, 1.0)).unwrap();
        assert_eq!(r.indices, vec![0]);
        assert_eq!(r.objective_value, 0.9);
    }

    #[test]
    fn invalid_configs() {
        assert!(select_greedy(&three_point(), &cfg(0, 1.0)).is_err());
        assert!(select_greedy(&three_point(), &cfg(2, -1.0)).is_err());
        assert!(select_greedy(&three_point(), &cfg(2, f64::NAN)).is_err());
    }

    #[test]
    fn enumeration_guard_refuses() {
        let inst = generate_uniform_instances(&StudyParams {
            instances: 1,
            t_min: 37,
            t_max: 37,
            seed: 1,
        })
        .remove(0);
        let c = inst.cache().unwrap();
        match select_exact(&c, &cfg(3, 1.0), 7769, Execution::Sequential) {
            Err(SelectionError::EnumerationGuard { count, limit }) => {
                assert_eq!(count, 7770);
                assert_eq!(limit, 7769);
            }
            other => panic!("expected refusal, got {other:?}"),
        }
        let r = select_exact(&c, &cfg(3, 1.0), 7770, Execution::Parallel).unwrap();
        assert_eq!(r.evaluated_subsets, Some(7770));
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(37, 3), 7770);
        assert_eq!(binomial(5, 0), 1);
        assert_eq!(binomial(3, 4), 0);
        assert_eq!(binomial(10, 10), 1);
        assert_eq!(binomial(12, 3), 220);
    }

    #[test]
    fn combinations_are_lexicographic_and_complete() {
        let mut seen = vec![];
        for_each_combination(0, 5, 3, &[], |c| seen.push(c.to_vec()));
        assert_eq!(seen.len(), 10);
        assert_eq!(seen.first().unwrap(), &vec![0, 1, 2]);
        assert_eq!(seen.last().unwrap(), &vec![2, 3, 4]);
        let mut sorted = seen.clone();
        sorted.sort();
        assert_eq!(seen, sorted);
    }

    #[test]
    fn baselines() {
        let c = ScoreCache::from_dense(vec![0.3, 0.3, 0.1], &[0.0; 9], "t").unwrap();
        assert_eq!(select_importance_only(&c, &cfg(2, 1.0)).unwrap().indices, vec![0, 1]);
        let d = select_diversity_only(&three_point(), &cfg(2, 1.0)).unwrap();
        assert_eq!(d.indices, vec![0, 2]);
        let inst = generate_uniform_instances(&StudyParams {
            instances: 1,
            t_min: 20,
            t_max: 20,
            seed: 3,
        })
        .remove(0);
        let c = inst.cache().unwrap();
        let a = select_random(&c, &cfg(3, 1.0), 42).unwrap();
        let b = select_random(&c, &cfg(3, 1.0), 42).unwrap();
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.indices.len(), 3);
        assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn modular_objective_is_solved_exactly() {
        let instances = generate_uniform_instances(&StudyParams {
            instances: 50,
            t_min: 5,
            t_max: 10,
            seed: 9,
        });
        for inst in instances {
            let n = inst.len();
            let zero = Instance {
                phi: inst.phi.clone(),
                d: vec![0.0; n * n],
            };
            let r = compare_on_instance(&zero, &cfg(3, 1.0), DEFAULT_ENUMERATION_GUARD).unwrap();
            assert!(r.matched());
        }
        let report = approximation_study(
            &[Instance {
                phi: vec![0.2, 0.4, 0.6],
                d: vec![0.0; 9],
            }],
            &cfg(2, 1.0),
            DEFAULT_ENUMERATION_GUARD,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(report.match_rate, 1.0);
        assert_eq!(report.mean_ratio, 1.0);
    }

    #[test]
    fn study_is_independent_of_execution_mode() {
        let params = StudyParams {
            instances: 30,
            t_min: 8,
            t_max: 12,
            seed: 5,
        };
        let inst = generate_uniform_instances(&params);
        let a = approximation_study(&inst, &cfg(3, 1.0), DEFAULT_ENUMERATION_GUARD, Execution::Sequential).unwrap();
        let b = approximation_study(&inst, &cfg(3, 1.0), DEFAULT_ENUMERATION_GUARD, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seed_zero_study_reference_values() {
        let inst = generate_uniform_instances(&StudyParams {
            instances: 200,
            t_min: 8,
            t_max: 12,
            seed: 0,
        });
        let r = approximation_study(&inst, &cfg(3, 1.0), DEFAULT_ENUMERATION_GUARD, Execution::Parallel).unwrap();
        assert_eq!((r.match_rate * 200.0).round() as usize, 143);
        assert!((r.mean_ratio - 0.990747).abs() < 1e-6, "{}", r.mean_ratio);
        assert_eq!((r.top1pct_rate * 200.0).round() as usize, 164);
    }

    #[test]
    fn guard_violations_are_skipped() {
        let inst = generate_uniform_instances(&StudyParams {
            instances: 3,
            t_min: 10,
            t_max: 10,
            seed: 1,
        });
        let r = approximation_study(&inst, &cfg(3, 1.0), 100, Execution::Sequential).unwrap();
        assert_eq!(r.skipped, 3);
        assert_eq!(r.instances, 0);
    }

    proptest! {
        #[test]
        fn exact_agrees_with_bitmask_oracle(seed in 0u64..10_000, budget in 1usize..5, lambda in 0.0f64..2.0) {
            let inst = generate_uniform_instances(&StudyParams { instances: 1, t_min: 1, t_max: 9, seed }).remove(0);
            let c = inst.cache().unwrap();
            let config = cfg(budget, lambda);
            let (idx, v) = brute_force(&inst, budget, lambda);
            let e = select_exact(&c, &config, DEFAULT_ENUMERATION_GUARD, Execution::Parallel).unwrap();
            prop_assert_eq!(&e.indices, &idx);
            prop_assert!((e.objective_value - v).abs() < 1e-9);
        }

        #[test]
        fn greedy_invariants(seed in 0u64..10_000, budget in 1usize..6, lambda in 0.0f64..2.0) {
            let inst = generate_uniform_instances(&StudyParams { instances: 1, t_min: 1, t_max: 12, seed }).remove(0);
            let c = inst.cache().unwrap();
            let config = cfg(budget, lambda);
            let g = select_greedy(&c, &config).unwrap();
            prop_assert_eq!(g.indices.len(), budget.min(inst.len()));
            prop_assert!(g.indices.windows(2).all(|w| w[0] < w[1]));
            let recomputed = objective(&g.indices, &c, lambda).unwrap();
            prop_assert!((recomputed - g.objective_value).abs() < 1e-9);
            let traced: f64 = g.gain_trace.iter().map(|s| s.gain).sum();
            prop_assert!((traced - g.objective_value).abs() < 1e-9);
            let e = select_exact(&c, &config, DEFAULT_ENUMERATION_GUARD, Execution::Sequential).unwrap();
            prop_assert!(e.objective_value >= g.objective_value - 1e-12);
            let r = select_random(&c, &config, seed).unwrap();
            prop_assert!(e.objective_value >= r.objective_value - 1e-12);
            prop_assert_eq!(select_greedy(&c, &config).unwrap(), g);
        }
    }
}
