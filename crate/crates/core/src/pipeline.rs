//! End-to-end curation: load, prune, score, select, post-sample, write.
//!
//! Trajectories are processed independently (in parallel when enabled) and
//! reduced in input order, so outputs never depend on the worker count. A
//! trajectory that fails at any stage goes to the rejects file with the stage
//! and reason; the run continues.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::par::{map_ordered, with_workers, Execution};
use crate::prompts::{write_prompts, PromptError};
use crate::pruning::{prune_step, semantic_query, AppliedPruner, PruneConfig, PruneReport, PruneStrategy, Pruned};
use crate::selection::{select, GainStep, SelectionConfig, SelectionMethod, DEFAULT_ENUMERATION_GUARD};
use crate::similarity::{
    build_cache_from_texts, CacheMode, CosineBackend, OverlapBackend, RemoteBackend, SimilarityError,
    SimilarityProvider,
};
use crate::trajectory::{
    read_trajectory_records, write_jsonl, CuratedStep, LoadError, ReasoningOrigin, Trajectory, WriteError,
};

/// Histogram bucket upper bounds in tokens: 64, 128, ..., 262144.
pub const HISTOGRAM_BOUNDS: [usize; 13] = [
    64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384, 32768, 65536, 131072, 262144,
];

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Write(#[from] WriteError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("similarity backend: {0}")]
    Backend(#[from] SimilarityError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// `overlap`, `cosine:FILE` or `remote:URL`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimilaritySource {
    Overlap,
    Cosine(PathBuf),
    Remote(String),
}

impl FromStr for SimilaritySource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "overlap" {
            return Ok(SimilaritySource::Overlap);
        }
        if let Some(path) = s.strip_prefix("cosine:").filter(|p| !p.is_empty()) {
            return Ok(SimilaritySource::Cosine(PathBuf::from(path)));
        }
        if let Some(url) = s.strip_prefix("remote:").filter(|u| !u.is_empty()) {
            return Ok(SimilaritySource::Remote(url.to_string()));
        }
        Err(format!(
            "unknown similarity backend `{s}` (expected overlap, cosine:FILE or remote:URL)"
        ))
    }
}

impl SimilaritySource {
    pub fn build(&self) -> Result<Arc<dyn SimilarityProvider>, SimilarityError> {
        Ok(match self {
            SimilaritySource::Overlap => Arc::new(OverlapBackend),
            SimilaritySource::Cosine(path) => Arc::new(CosineBackend::from_file(path)?),
            SimilaritySource::Remote(url) => Arc::new(RemoteBackend::connect(url)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreOn {
    Raw,
    #[default]
    Pruned,
}

impl FromStr for ScoreOn {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(ScoreOn::Raw),
            "pruned" => Ok(ScoreOn::Pruned),
            _ => Err(format!("unknown score-on mode `{s}` (expected raw or pruned)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub output: PathBuf,
    pub prune: PruneConfig,
    pub select: SelectionConfig,
    pub similarity: SimilaritySource,
    pub post_sample: Option<usize>,
    pub seed: u64,
    pub render_prompts: Option<PathBuf>,
    pub workers: Option<usize>,
    pub execution: Execution,
    /// Defaults to `<output>.stats.json`.
    pub stats: Option<PathBuf>,
    /// Defaults to `<output>.rejects.jsonl`.
    pub rejects: Option<PathBuf>,
    pub score_on: ScoreOn,
    pub exact_guard: u128,
}

impl PipelineConfig {
    pub fn new(input: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            input: input.into(),
            output: output.into(),
            prune: PruneConfig::default(),
            select: SelectionConfig::default(),
            similarity: SimilaritySource::Overlap,
            post_sample: None,
            seed: 0,
            render_prompts: None,
            workers: None,
            execution: Execution::Parallel,
            stats: None,
            rejects: None,
            score_on: ScoreOn::Pruned,
            exact_guard: DEFAULT_ENUMERATION_GUARD,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.select
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.workers == Some(0) {
            return Err(PipelineError::Config("workers must be at least 1".into()));
        }
        let semantic = matches!(
            self.prune.strategy,
            PruneStrategy::SemanticTopK | PruneStrategy::UnionTargetSemantic
        );
        if semantic && self.prune.semantic_k == 0 {
            return Err(PipelineError::Config("semantic-k must be at least 1".into()));
        }
        if self.input == self.output {
            return Err(PipelineError::Config("input and output must differ".into()));
        }
        Ok(())
    }

    pub fn stats_path(&self) -> PathBuf {
        self.stats
            .clone()
            .unwrap_or_else(|| sibling(&self.output, "stats.json"))
    }

    pub fn rejects_path(&self) -> PathBuf {
        self.rejects
            .clone()
            .unwrap_or_else(|| sibling(&self.output, "rejects.jsonl"))
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// One quarantined input record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectRecord {
    pub line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub stage: String,
    pub reason: String,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    /// Inclusive upper bound in tokens; `None` is the overflow bucket.
    pub le: Option<usize>,
    pub count: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub buckets: Vec<Bucket>,
}

impl Default for Histogram {
    fn default() -> Self {
        let mut buckets: Vec<Bucket> = HISTOGRAM_BOUNDS
            .iter()
            .map(|&b| Bucket {
                le: Some(b),
                count: 0,
                tokens: 0,
            })
            .collect();
        buckets.push(Bucket {
            le: None,
            count: 0,
            tokens: 0,
        });
        Histogram { buckets }
    }
}

impl Histogram {
    pub fn add(&mut self, tokens: usize) {
        let i = HISTOGRAM_BOUNDS
            .iter()
            .position(|&b| tokens <= b)
            .unwrap_or(HISTOGRAM_BOUNDS.len());
        self.buckets[i].count += 1;
        self.buckets[i].tokens += tokens;
    }

    pub fn count(&self) -> usize {
        self.buckets.iter().map(|b| b.count).sum()
    }

    pub fn tokens(&self) -> usize {
        self.buckets.iter().map(|b| b.tokens).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSummary {
    pub trajectories: usize,
    pub total: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl ObjectiveSummary {
    fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return ObjectiveSummary::default();
        }
        let total: f64 = values.iter().sum();
        ObjectiveSummary {
            trajectories: values.len(),
            total,
            mean: total / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Run statistics. Wall times are kept out of the serialized form so that
/// identical runs write identical stats.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub trajectories_in: usize,
    pub trajectories_out: usize,
    pub trajectories_rejected: usize,
    pub steps_in: usize,
    pub steps_selected: usize,
    pub steps_unselected: usize,
    pub steps_rejected: usize,
    pub steps_out: usize,
    pub post_sample: Option<usize>,
    pub post_sample_clamped: usize,
    pub tokens_before: usize,
    pub tokens_after: usize,
    pub reduction_ratio: f64,
    pub histogram_before: Histogram,
    pub histogram_after: Histogram,
    pub prune_counts: BTreeMap<String, usize>,
    pub missing_target: usize,
    pub objective: ObjectiveSummary,
    pub selection_method: String,
    pub prune_strategy: String,
    pub score_on: ScoreOn,
    pub provider_id: String,
    #[serde(skip)]
    pub stage_times: Vec<(String, Duration)>,
}

impl RunStats {
    /// Every input step is selected, unselected or rejected exactly once.
    pub fn is_conserved(&self) -> bool {
        self.steps_in == self.steps_selected + self.steps_unselected + self.steps_rejected
    }

    pub fn reject_rate(&self) -> f64 {
        if self.trajectories_in == 0 {
            0.0
        } else {
            self.trajectories_rejected as f64 / self.trajectories_in as f64
        }
    }
}

/// Pruning and selection outcome for one accepted trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryOutcome {
    pub curated: Vec<CuratedStep>,
    pub reports: Vec<PruneReport>,
    pub indices: Vec<usize>,
    pub objective_value: f64,
    pub gain_trace: Vec<GainStep>,
}

#[derive(Debug, Clone)]
pub struct StageFailure {
    pub stage: &'static str,
    pub reason: String,
}

fn fail(stage: &'static str) -> impl Fn(String) -> StageFailure {
    move |reason| StageFailure { stage, reason }
}

/// Prunes every step of a trajectory.
pub fn prune_trajectory(
    traj: &Trajectory,
    config: &PruneConfig,
    provider: &dyn SimilarityProvider,
) -> Result<Vec<Pruned>, StageFailure> {
    traj.steps
        .iter()
        .map(|s| {
            let query = semantic_query(&traj.goal, &s.answer);
            prune_step(&s.state_raw, &s.action, &query, config, provider)
                .map_err(|e| fail("prune")(format!("step {}: {e}", s.index)))
        })
        .collect()
}

/// Prunes, scores and selects one trajectory.
pub fn process_trajectory(
    traj: &Trajectory,
    config: &PipelineConfig,
    select_config: &SelectionConfig,
    provider: &Arc<dyn SimilarityProvider>,
) -> Result<TrajectoryOutcome, StageFailure> {
    let pruned = prune_trajectory(traj, &config.prune, provider.as_ref())?;
    let states: Vec<String> = match config.score_on {
        ScoreOn::Pruned => pruned.iter().map(|p| p.text.clone()).collect(),
        ScoreOn::Raw => traj.steps.iter().map(|s| s.state_raw.clone()).collect(),
    };
    let answers = traj.steps.iter().map(|s| s.answer.clone()).collect();
    let cache = build_cache_from_texts(&traj.goal, states, answers, Arc::clone(provider), CacheMode::Eager)
        .map_err(|e| fail("score")(e.to_string()))?;
    let result = select(&cache, select_config, config.exact_guard).map_err(|e| fail("select")(e.to_string()))?;
    let curated = result
        .indices
        .iter()
        .map(|&i| {
            let s = &traj.steps[i];
            CuratedStep {
                trajectory_id: traj.id.clone(),
                index: s.index,
                goal: traj.goal.clone(),
                history: s.history.clone(),
                state_pruned: pruned[i].text.clone(),
                action: s.action.clone(),
                reasoning: s.reasoning.clone(),
                reasoning_origin: ReasoningOrigin::Original,
            }
        })
        .collect();
    Ok(TrajectoryOutcome {
        curated,
        reports: pruned.into_iter().map(|p| p.report).collect(),
        indices: result.indices,
        objective_value: result.objective_value,
        gain_trace: result.gain_trace,
    })
}

/// SplitMix64 step, used to give each trajectory its own seed.
pub fn derive_seed(master: u64, ordinal: u64) -> u64 {
    let mut z = master ^ ordinal.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keeps a uniformly random `n`-subset of `pool`, preserving order. Returns
/// whether the request was clamped to the pool size.
pub fn post_sample<T: Clone>(pool: &[T], n: usize, seed: u64) -> (Vec<T>, bool) {
    if n >= pool.len() {
        return (pool.to_vec(), n > pool.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = sample(&mut rng, pool.len(), n).into_vec();
    keep.sort_unstable();
    (keep.into_iter().map(|i| pool[i].clone()).collect(), false)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub stats: RunStats,
    pub curated: Vec<CuratedStep>,
    pub rejects: Vec<RejectRecord>,
}

fn strategy_label(s: PruneStrategy) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn applied_label(a: AppliedPruner) -> String {
    serde_json::to_value(a)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Runs the whole pipeline in memory, without writing anything.
pub fn curate(config: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    config.validate()?;
    let mut times = Vec::new();
    let t = Instant::now();
    let records = read_trajectory_records(&config.input, None)?;
    times.push(("load".to_string(), t.elapsed()));

    let provider = config.similarity.build()?;
    let t = Instant::now();
    let outcomes = with_workers(config.workers, || {
        map_ordered(&records, config.execution, |rec| {
            let traj = rec.result.as_ref().map_err(|e| fail("load")(e.to_string()))?;
            let mut select_cfg = config.select;
            if let SelectionMethod::Random { seed } = select_cfg.method {
                select_cfg.method = SelectionMethod::Random {
                    seed: derive_seed(seed, rec.line as u64),
                };
            }
            process_trajectory(traj, config, &select_cfg, &provider)
        })
    });
    times.push(("prune+score+select".to_string(), t.elapsed()));

    let mut stats = RunStats {
        selection_method: config.select.method.tag().to_string(),
        prune_strategy: strategy_label(config.prune.strategy),
        score_on: config.score_on,
        provider_id: provider.id().to_string(),
        post_sample: config.post_sample,
        ..RunStats::default()
    };
    let mut pool = Vec::new();
    let mut rejects = Vec::new();
    let mut objectives = Vec::new();
    for (rec, outcome) in records.iter().zip(outcomes) {
        stats.trajectories_in += 1;
        stats.steps_in += rec.step_count;
        match outcome {
            Ok(o) => {
                stats.trajectories_out += 1;
                stats.steps_selected += o.curated.len();
                stats.steps_unselected += rec.step_count - o.curated.len();
                for r in &o.reports {
                    stats.tokens_before += r.tokens_before;
                    stats.tokens_after += r.tokens_after;
                    stats.histogram_before.add(r.tokens_before);
                    stats.histogram_after.add(r.tokens_after);
                    *stats.prune_counts.entry(applied_label(r.applied)).or_default() += 1;
                    if r.applied == AppliedPruner::MissingTargetPrefix {
                        stats.missing_target += 1;
                    }
                }
                objectives.push(o.objective_value);
                pool.extend(o.curated);
            }
            Err(f) => {
                stats.trajectories_rejected += 1;
                stats.steps_rejected += rec.step_count;
                rejects.push(RejectRecord {
                    line: rec.line,
                    id: rec.id.clone(),
                    stage: f.stage.to_string(),
                    reason: f.reason,
                    steps: rec.step_count,
                });
            }
        }
    }
    stats.objective = ObjectiveSummary::from_values(&objectives);
    stats.reduction_ratio = if stats.tokens_before == 0 {
        0.0
    } else {
        1.0 - stats.tokens_after as f64 / stats.tokens_before as f64
    };

    let curated = match config.post_sample {
        Some(n) => {
            let (kept, clamped) = post_sample(&pool, n, config.seed);
            if clamped {
                stats.post_sample_clamped += 1;
            }
            kept
        }
        None => pool,
    };
    stats.steps_out = curated.len();
    stats.stage_times = times;
    Ok(RunOutput {
        stats,
        curated,
        rejects,
    })
}

/// Runs the pipeline and writes the curated set, rejects, stats and, when
/// requested, rendered prompts.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunStats, PipelineError> {
    let mut out = curate(config)?;
    let t = Instant::now();
    write_jsonl(&out.curated, &config.output)?;
    write_jsonl(&out.rejects, &config.rejects_path())?;
    if let Some(dir) = &config.render_prompts {
        write_prompts(&out.curated, dir)?;
    }
    out.stats.stage_times.push(("write".to_string(), t.elapsed()));
    report_stats(&out.stats, &config.stats_path())?;
    Ok(out.stats)
}

/// Plain-text summary with the before/after token histograms.
pub fn stats_table(stats: &RunStats) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "trajectories  in {:>8}  out {:>8}  rejected {:>6}",
        stats.trajectories_in, stats.trajectories_out, stats.trajectories_rejected
    );
    let _ = writeln!(
        s,
        "steps         in {:>8}  selected {:>8}  unselected {:>8}  rejected {:>6}  out {:>8}",
        stats.steps_in, stats.steps_selected, stats.steps_unselected, stats.steps_rejected, stats.steps_out
    );
    let _ = writeln!(
        s,
        "tokens        before {:>12}  after {:>12}  reduction {:.4}",
        stats.tokens_before, stats.tokens_after, stats.reduction_ratio
    );
    let _ = writeln!(s, "missing target {}", stats.missing_target);
    for (k, v) in &stats.prune_counts {
        let _ = writeln!(s, "pruner {k:<22} {v:>8}");
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:>10}  {:>8}  {:>8}", "tokens <=", "before", "after");
    for (b, a) in stats
        .histogram_before
        .buckets
        .iter()
        .zip(&stats.histogram_after.buckets)
    {
        let label = b.le.map_or_else(|| "inf".to_string(), |v| v.to_string());
        let _ = writeln!(s, "{label:>10}  {:>8}  {:>8}", b.count, a.count);
    }
    s
}

/// Writes the JSON report to `path` and the table next to it with a `.txt`
/// extension.
pub fn report_stats(stats: &RunStats, path: &Path) -> Result<(), PipelineError> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| PipelineError::Io { path: p, source }
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    let mut json = serde_json::to_string_pretty(stats).expect("stats serialize");
    json.push('\n');
    fs::write(path, json).map_err(io(path))?;
    let table = path.with_extension("txt");
    fs::write(&table, stats_table(stats)).map_err(io(&table))?;
    Ok(())
}

/// Per-step record written by `prune-only`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunedStepRecord {
    pub trajectory_id: String,
    pub index: usize,
    pub state_pruned: String,
    pub report: PruneReport,
}

/// Per-trajectory record written by `select-only`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub trajectory_id: String,
    pub indices: Vec<usize>,
    pub objective_value: f64,
    pub gain_trace: Vec<GainStep>,
}

/// Pruning stage alone. Returns records for every step of every valid
/// trajectory, plus rejects.
pub fn prune_only(config: &PipelineConfig) -> Result<(Vec<PrunedStepRecord>, Vec<RejectRecord>), PipelineError> {
    config.validate()?;
    let records = read_trajectory_records(&config.input, None)?;
    let provider = config.similarity.build()?;
    let results = with_workers(config.workers, || {
        map_ordered(&records, config.execution, |rec| {
            let traj = rec.result.as_ref().map_err(|e| fail("load")(e.to_string()))?;
            let pruned = prune_trajectory(traj, &config.prune, provider.as_ref())?;
            Ok::<_, StageFailure>(
                traj.steps
                    .iter()
                    .zip(pruned)
                    .map(|(s, p)| PrunedStepRecord {
                        trajectory_id: traj.id.clone(),
                        index: s.index,
                        state_pruned: p.text,
                        report: p.report,
                    })
                    .collect::<Vec<_>>(),
            )
        })
    });
    Ok(split_results(&records, results))
}

/// Scoring and selection alone, on raw states.
pub fn select_only(config: &PipelineConfig) -> Result<(Vec<SelectionRecord>, Vec<RejectRecord>), PipelineError> {
    let mut config = config.clone();
    config.prune.strategy = PruneStrategy::None;
    config.validate()?;
    let records = read_trajectory_records(&config.input, None)?;
    let provider = config.similarity.build()?;
    let results = with_workers(config.workers, || {
        map_ordered(&records, config.execution, |rec| {
            let traj = rec.result.as_ref().map_err(|e| fail("load")(e.to_string()))?;
            let o = process_trajectory(traj, &config, &config.select, &provider)?;
            Ok::<_, StageFailure>(vec![SelectionRecord {
                trajectory_id: traj.id.clone(),
                indices: o.indices,
                objective_value: o.objective_value,
                gain_trace: o.gain_trace,
            }])
        })
    });
    Ok(split_results(&records, results))
}

fn split_results<T>(
    records: &[crate::trajectory::RecordOutcome],
    results: Vec<Result<Vec<T>, StageFailure>>,
) -> (Vec<T>, Vec<RejectRecord>) {
    let mut ok = Vec::new();
    let mut rejects = Vec::new();
    for (rec, r) in records.iter().zip(results) {
        match r {
            Ok(v) => ok.extend(v),
            Err(f) => rejects.push(RejectRecord {
                line: rec.line,
                id: rec.id.clone(),
                stage: f.stage.to_string(),
                reason: f.reason,
                steps: rec.step_count,
            }),
        }
    }
    (ok, rejects)
}
