//! Text similarity, the derived pseudo-distance, and per-trajectory score caches.
//!
//! Every backend implements [`SimilarityProvider`]: a deterministic score in
//! `[0, 1]` with `sim(a, a) ≈ 1` for non-empty `a`. On top of it:
//!
//! * importance of a step is `sim(goal, state)`;
//! * pseudo-distance is `1 - sim(x, y)`;
//! * diversity of two steps is the larger of the state and answer distances.

mod cache;
mod embedding;
mod overlap;
mod remote;

pub use cache::{build_cache, build_cache_from_texts, CacheMode, ScoreCache};
pub use embedding::{
    content_key, text_prefix, CosineBackend, EmbeddingRecord, EmbeddingTable, HASH_RULE, PREFIX_CHARS,
};
pub use overlap::OverlapBackend;
pub use remote::RemoteBackend;

use std::sync::Arc;

use crate::trajectory::Step;

/// Tolerance on `sim(a, a) >= 1 - SELF_SIM_EPS`.
pub const SELF_SIM_EPS: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum SimilarityError {
    #[error("{provider}: {message}")]
    Backend { provider: String, message: String },
    #[error("no embedding for text starting {prefix:?}")]
    MissingEmbedding { prefix: String },
    #[error("embedding key {key} collides: stored prefix {stored:?}, text prefix {text:?}")]
    HashCollision { key: String, stored: String, text: String },
    #[error("embedding file line {line}: {message}")]
    EmbeddingFile { line: usize, message: String },
    #[error("score cache built with `{expected}` cannot be filled by `{found}`")]
    ProviderMismatch { expected: String, found: String },
    #[error("invalid scores: {0}")]
    InvalidScores(String),
    #[error("index {index} out of range for trajectory of length {len}")]
    OutOfRange { index: usize, len: usize },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// A pluggable text similarity.
pub trait SimilarityProvider: Send + Sync {
    /// Backend name, model identifier and score mapping. Caches record it.
    fn id(&self) -> &str;

    fn sim(&self, a: &str, b: &str) -> Result<f64, SimilarityError>;

    fn sim_many(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, SimilarityError> {
        pairs.iter().map(|(a, b)| self.sim(a, b)).collect()
    }
}

impl<P: SimilarityProvider + ?Sized> SimilarityProvider for Arc<P> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn sim(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
        (**self).sim(a, b)
    }
    fn sim_many(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, SimilarityError> {
        (**self).sim_many(pairs)
    }
}

/// Clamps a backend score into `[0, 1]`; NaN is a backend error.
pub(crate) fn clamp_score(provider: &str, x: f64) -> Result<f64, SimilarityError> {
    if x.is_nan() {
        return Err(SimilarityError::Backend {
            provider: provider.to_string(),
            message: "similarity is NaN".into(),
        });
    }
    Ok(x.clamp(0.0, 1.0))
}

/// The two texts of a step that diversity compares.
#[derive(Debug, Clone, Copy)]
pub struct StepText<'a> {
    pub state: &'a str,
    pub answer: &'a str,
}

impl<'a> From<&'a Step> for StepText<'a> {
    fn from(s: &'a Step) -> Self {
        StepText {
            state: &s.state_raw,
            answer: &s.answer,
        }
    }
}

pub fn importance(goal: &str, state: &str, sim: &dyn SimilarityProvider) -> Result<f64, SimilarityError> {
    sim.sim(goal, state)
}

pub fn pseudo_distance(x: &str, y: &str, sim: &dyn SimilarityProvider) -> Result<f64, SimilarityError> {
    Ok(1.0 - sim.sim(x, y)?)
}

pub fn diversity(a: StepText<'_>, b: StepText<'_>, sim: &dyn SimilarityProvider) -> Result<f64, SimilarityError> {
    let scores = sim.sim_many(&[(a.state, b.state), (a.answer, b.answer)])?;
    Ok(diversity_from_sims(scores[0], scores[1]))
}

pub(crate) fn diversity_from_sims(state_sim: f64, answer_sim: f64) -> f64 {
    (1.0 - state_sim).max(1.0 - answer_sim)
}
