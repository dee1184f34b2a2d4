//! Curation toolkit for web-agent trajectory datasets.
//!
//! * [`trajectory`]: data model and JSONL I/O.
//! * [`axtree`]: accessibility-tree parsing and target lookup.
//! * [`pruning`]: target-centered state pruning and its variants.
//! * [`similarity`]: pluggable similarity backends and score caches.
//! * [`selection`]: importance/diversity step selection and the exact oracle.
//! * [`prompts`]: reasoning-synthesis and judge prompts, response ingestion.
//! * [`pipeline`]: the end-to-end curation run.

pub mod axtree;
pub mod par;
pub mod pipeline;
pub mod prompts;
pub mod pruning;
pub mod selection;
pub mod similarity;
pub mod trajectory;

pub use par::Execution;
pub use pipeline::{curate, run_pipeline, PipelineConfig, RunStats, ScoreOn, SimilaritySource};
pub use pruning::{prune_step, PruneConfig, PruneStrategy};
pub use selection::{select_exact, select_greedy, SelectionConfig, SelectionMethod, SelectionResult};
pub use similarity::{ScoreCache, SimilarityProvider};
pub use trajectory::{Action, CuratedStep, Step, Trajectory};
