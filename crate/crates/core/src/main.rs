use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use trajcurate::par::Execution;
use trajcurate::pipeline::{self, stats_table, PipelineConfig, ScoreOn, SimilaritySource};
use trajcurate::prompts::{ingest_synthesized, load_responses};
use trajcurate::pruning::{PruneConfig, PruneStrategy, DEFAULT_NON_NODE_WINDOW, DEFAULT_SEMANTIC_K, DEFAULT_WINDOW};
use trajcurate::selection::{
    approximation_study, generate_uniform_instances, SelectionConfig, SelectionMethod, StudyParams, DEFAULT_BUDGET,
    DEFAULT_ENUMERATION_GUARD, DEFAULT_LAMBDA,
};
use trajcurate::trajectory::{load_curated, write_curated, write_jsonl};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_REJECTS: u8 = 3;

#[derive(Parser)]
#[command(
    name = "trajcurate",
    version,
    about = "Prune, score and select steps from web-agent trajectories"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: prune, score, select, post-sample, write.
    Curate(CurateArgs),
    /// Greedy vs exact comparison on random instances.
    Study(StudyArgs),
    /// Prune every step and write the pruned states.
    PruneOnly(PruneOnlyArgs),
    /// Score and select on raw states; write the chosen indices.
    SelectOnly(SelectOnlyArgs),
    /// Merge synthesized reasoning into a curated file.
    Ingest(IngestArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum PruneArg {
    Target,
    Offset,
    Bid,
    Semantic,
    Union,
    Prefix,
    None,
}

impl From<PruneArg> for PruneStrategy {
    fn from(p: PruneArg) -> Self {
        match p {
            PruneArg::Target => PruneStrategy::TargetCentered,
            PruneArg::Offset => PruneStrategy::TargetCenteredOffset,
            PruneArg::Bid => PruneStrategy::PruneByBid,
            PruneArg::Semantic => PruneStrategy::SemanticTopK,
            PruneArg::Union => PruneStrategy::UnionTargetSemantic,
            PruneArg::Prefix => PruneStrategy::PrefixOnly,
            PruneArg::None => PruneStrategy::None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum MethodArg {
    Greedy,
    Exact,
    Random,
    Importance,
    Diversity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ScoreOnArg {
    Raw,
    Pruned,
}

/// Pruning flags. Unset values fall back to the config file, then defaults.
#[derive(Args, Clone, Default, Debug)]
struct PruneFlags {
    #[arg(long, value_enum)]
    prune: Option<PruneArg>,
    /// Window half-width in indexed nodes [default: 60]
    #[arg(long)]
    window: Option<usize>,
    /// Offset of the flanking windows [default: 0]
    #[arg(long)]
    offset: Option<usize>,
    /// Prefix half-width for non-node actions [default: 120]
    #[arg(long)]
    non_node_window: Option<usize>,
    /// Leaves kept by semantic pruning [default: 80]
    #[arg(long)]
    semantic_k: Option<usize>,
}

impl PruneFlags {
    fn or(self, file: &PruneFlags) -> Self {
        PruneFlags {
            prune: self.prune.or(file.prune),
            window: self.window.or(file.window),
            offset: self.offset.or(file.offset),
            non_node_window: self.non_node_window.or(file.non_node_window),
            semantic_k: self.semantic_k.or(file.semantic_k),
        }
    }

    fn config(&self) -> PruneConfig {
        PruneConfig {
            strategy: self.prune.unwrap_or(PruneArg::Target).into(),
            window: self.window.unwrap_or(DEFAULT_WINDOW),
            offset: self.offset.unwrap_or(0),
            non_node_window: self.non_node_window.unwrap_or(DEFAULT_NON_NODE_WINDOW),
            semantic_k: self.semantic_k.unwrap_or(DEFAULT_SEMANTIC_K),
        }
    }
}

#[derive(Args, Clone, Default, Debug)]
struct SelectFlags {
    /// Steps kept per trajectory [default: 3]
    #[arg(long)]
    budget: Option<usize>,
    /// Diversity weight [default: 1.0]
    #[arg(long)]
    lambda: Option<f64>,
    /// Selection method [default: greedy]
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Enumeration limit for the exact method [default: 1000000]
    #[arg(long)]
    guard: Option<u128>,
}

impl SelectFlags {
    fn or(self, file: &SelectFlags) -> Self {
        SelectFlags {
            budget: self.budget.or(file.budget),
            lambda: self.lambda.or(file.lambda),
            method: self.method.or(file.method),
            guard: self.guard.or(file.guard),
        }
    }

    fn config(&self, seed: u64) -> SelectionConfig {
        let method = match self.method.unwrap_or(MethodArg::Greedy) {
            MethodArg::Greedy => SelectionMethod::Greedy,
            MethodArg::Exact => SelectionMethod::Exact,
            MethodArg::Random => SelectionMethod::Random { seed },
            MethodArg::Importance => SelectionMethod::ImportanceOnly,
            MethodArg::Diversity => SelectionMethod::DiversityOnly,
        };
        SelectionConfig {
            budget: self.budget.unwrap_or(DEFAULT_BUDGET),
            lambda: self.lambda.unwrap_or(DEFAULT_LAMBDA),
            method,
        }
    }
}

#[derive(Args, Clone, Default, Debug)]
struct RunFlags {
    /// overlap | cosine:FILE | remote:URL [default: overlap]
    #[arg(long)]
    similarity: Option<String>,
    /// Master seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (1 runs sequentially)
    #[arg(long)]
    workers: Option<usize>,
}

impl RunFlags {
    fn or(self, file: &RunFlags) -> Self {
        RunFlags {
            similarity: self.similarity.or_else(|| file.similarity.clone()),
            seed: self.seed.or(file.seed),
            workers: self.workers.or(file.workers),
        }
    }
}

/// Keys accepted in a `--config` JSON file; same names as the flags.
#[derive(Default, Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct CurateFile {
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    prune: Option<PruneArg>,
    window: Option<usize>,
    offset: Option<usize>,
    non_node_window: Option<usize>,
    semantic_k: Option<usize>,
    budget: Option<usize>,
    lambda: Option<f64>,
    method: Option<MethodArg>,
    guard: Option<u128>,
    similarity: Option<String>,
    seed: Option<u64>,
    workers: Option<usize>,
    post_sample: Option<usize>,
    stats: Option<PathBuf>,
    rejects: Option<PathBuf>,
    render_prompts: Option<PathBuf>,
    score_on: Option<ScoreOnArg>,
    max_reject_rate: Option<f64>,
}

#[derive(Args)]
struct CurateArgs {
    /// JSON file with defaults for any of the flags below
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    prune: PruneFlags,
    #[command(flatten)]
    select: SelectFlags,
    #[command(flatten)]
    run: RunFlags,
    /// Uniformly down-sample the curated pool to N steps
    #[arg(long)]
    post_sample: Option<usize>,
    /// Stats JSON path [default: OUTPUT.stats.json]
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Rejects JSONL path [default: OUTPUT.rejects.jsonl]
    #[arg(long)]
    rejects: Option<PathBuf>,
    /// Write reasoning and judge prompts for every curated step to DIR
    #[arg(long, value_name = "DIR")]
    render_prompts: Option<PathBuf>,
    /// Score pruned or raw states [default: pruned]
    #[arg(long, value_enum)]
    score_on: Option<ScoreOnArg>,
    /// Exit with status 3 when the rejected fraction of records exceeds this
    #[arg(long)]
    max_reject_rate: Option<f64>,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long, default_value_t = 8)]
    t_min: usize,
    #[arg(long, default_value_t = 12)]
    t_max: usize,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    t0: usize,
    #[arg(long, default_value_t = 200)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_ENUMERATION_GUARD)]
    guard: u128,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct PruneOnlyArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    prune: PruneFlags,
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    rejects: Option<PathBuf>,
}

#[derive(Args)]
struct SelectOnlyArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    select: SelectFlags,
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    rejects: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    /// Curated JSONL produced by `curate`
    #[arg(long)]
    curated: PathBuf,
    /// JSONL of {"key": "<trajectory id>#<step index>", "output": "<raw model output>"}
    #[arg(long)]
    responses: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Rejected responses [default: OUTPUT.rejects.jsonl]
    #[arg(long)]
    rejects: Option<PathBuf>,
}

enum Failure {
    Config(String),
    Runtime(anyhow::Error),
    Rejects(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

fn execution(workers: Option<usize>) -> Execution {
    if workers == Some(1) {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn base_config(input: PathBuf, output: PathBuf, run: &RunFlags) -> Result<PipelineConfig, Failure> {
    let mut cfg = PipelineConfig::new(input, output);
    if let Some(s) = &run.similarity {
        cfg.similarity = s.parse::<SimilaritySource>().map_err(config_err)?;
    }
    cfg.seed = run.seed.unwrap_or(0);
    cfg.workers = run.workers;
    cfg.execution = execution(run.workers);
    Ok(cfg)
}

fn pipeline_failure(e: pipeline::PipelineError) -> Failure {
    match e {
        pipeline::PipelineError::Config(m) => Failure::Config(m),
        other => Failure::Runtime(other.into()),
    }
}

fn read_config_file(path: &Path) -> Result<CurateFile, Failure> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn curate(args: CurateArgs) -> Result<(), Failure> {
    let file = match &args.config {
        Some(p) => read_config_file(p)?,
        None => CurateFile::default(),
    };
    let prune = args.prune.or(&PruneFlags {
        prune: file.prune,
        window: file.window,
        offset: file.offset,
        non_node_window: file.non_node_window,
        semantic_k: file.semantic_k,
    });
    let select = args.select.or(&SelectFlags {
        budget: file.budget,
        lambda: file.lambda,
        method: file.method,
        guard: file.guard,
    });
    let run = args.run.or(&RunFlags {
        similarity: file.similarity.clone(),
        seed: file.seed,
        workers: file.workers,
    });
    let input = args
        .input
        .or(file.input)
        .ok_or_else(|| config_err("--input is required"))?;
    let output = args
        .output
        .or(file.output)
        .ok_or_else(|| config_err("--output is required"))?;
    let mut cfg = base_config(input, output, &run)?;
    cfg.prune = prune.config();
    cfg.select = select.config(cfg.seed);
    cfg.exact_guard = select.guard.unwrap_or(DEFAULT_ENUMERATION_GUARD);
    cfg.post_sample = args.post_sample.or(file.post_sample);
    cfg.stats = args.stats.or(file.stats);
    cfg.rejects = args.rejects.or(file.rejects);
    cfg.render_prompts = args.render_prompts.or(file.render_prompts);
    cfg.score_on = match args.score_on.or(file.score_on).unwrap_or(ScoreOnArg::Pruned) {
        ScoreOnArg::Raw => ScoreOn::Raw,
        ScoreOnArg::Pruned => ScoreOn::Pruned,
    };
    let max_reject_rate = args.max_reject_rate.or(file.max_reject_rate);
    if let Some(r) = max_reject_rate {
        if !(0.0..=1.0).contains(&r) {
            return Err(config_err(format!("--max-reject-rate must be in [0, 1], got {r}")));
        }
    }

    let stats = pipeline::run_pipeline(&cfg).map_err(pipeline_failure)?;
    eprint!("{}", stats_table(&stats));
    for (stage, t) in &stats.stage_times {
        eprintln!("time {stage:<20} {:>10.3}s", t.as_secs_f64());
    }
    if stats.post_sample_clamped > 0 {
        eprintln!(
            "warning: --post-sample {} exceeds the curated pool of {}; pool kept whole",
            cfg.post_sample.unwrap_or(0),
            stats.steps_selected
        );
    }
    if let Some(limit) = max_reject_rate {
        if stats.reject_rate() > limit {
            return Err(Failure::Rejects(format!(
                "{} of {} records rejected ({:.4} > {limit})",
                stats.trajectories_rejected,
                stats.trajectories_in,
                stats.reject_rate()
            )));
        }
    }
    Ok(())
}

fn study(args: StudyArgs) -> Result<(), Failure> {
    if args.t_min == 0 || args.t_min > args.t_max {
        return Err(config_err("need 1 <= --t-min <= --t-max"));
    }
    let config = SelectionConfig {
        budget: args.t0,
        lambda: args.lambda,
        method: SelectionMethod::Greedy,
    };
    config.validate().map_err(|e| config_err(e.to_string()))?;
    let instances = generate_uniform_instances(&StudyParams {
        instances: args.instances,
        t_min: args.t_min,
        t_max: args.t_max,
        seed: args.seed,
    });
    let report = trajcurate::par::with_workers(args.workers, || {
        approximation_study(&instances, &config, args.guard, execution(args.workers))
    })
    .context("approximation study")?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn prune_only(args: PruneOnlyArgs) -> Result<(), Failure> {
    let mut cfg = base_config(args.input, args.output, &args.run)?;
    cfg.prune = args.prune.config();
    cfg.rejects = args.rejects;
    let (records, rejects) = pipeline::prune_only(&cfg).map_err(pipeline_failure)?;
    write_jsonl(&records, &cfg.output).context("writing pruned states")?;
    write_jsonl(&rejects, &cfg.rejects_path()).context("writing rejects")?;
    eprintln!("pruned {} steps, {} records rejected", records.len(), rejects.len());
    Ok(())
}

fn select_only(args: SelectOnlyArgs) -> Result<(), Failure> {
    let mut cfg = base_config(args.input, args.output, &args.run)?;
    cfg.select = args.select.config(cfg.seed);
    cfg.exact_guard = args.select.guard.unwrap_or(DEFAULT_ENUMERATION_GUARD);
    cfg.rejects = args.rejects;
    let (records, rejects) = pipeline::select_only(&cfg).map_err(pipeline_failure)?;
    write_jsonl(&records, &cfg.output).context("writing selections")?;
    write_jsonl(&rejects, &cfg.rejects_path()).context("writing rejects")?;
    eprintln!(
        "selected for {} trajectories, {} records rejected",
        records.len(),
        rejects.len()
    );
    Ok(())
}

fn ingest(args: IngestArgs) -> Result<(), Failure> {
    let curated = load_curated(&args.curated).context("reading curated file")?;
    let responses = load_responses(&args.responses).context("reading responses")?;
    let outcome = ingest_synthesized(&curated, &responses);
    write_curated(&outcome.steps, &args.output).context("writing curated file")?;
    let rejects = args.rejects.unwrap_or_else(|| {
        let mut s = args.output.as_os_str().to_owned();
        s.push(".rejects.jsonl");
        PathBuf::from(s)
    });
    write_jsonl(&outcome.rejections, &rejects).context("writing rejected responses")?;
    eprintln!(
        "ingested {} responses, rejected {}",
        outcome.accepted,
        outcome.rejections.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Curate(a) => curate(a),
        Command::Study(a) => study(a),
        Command::PruneOnly(a) => prune_only(a),
        Command::SelectOnly(a) => select_only(a),
        Command::Ingest(a) => ingest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(Failure::Rejects(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_REJECTS)
        }
    }
}
