use std::sync::{Arc, RwLock};

use super::{diversity_from_sims, SimilarityError, SimilarityProvider};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheMode {
    /// All pairwise diversities computed up front.
    Eager,
    /// Pairwise diversities computed on first access.
    Lazy,
}

struct LazySource {
    states: Vec<String>,
    answers: Vec<String>,
    provider: Arc<dyn SimilarityProvider>,
}

/// Importance vector plus a lazily filled, symmetric diversity half-matrix for
/// one trajectory. Entries never change once written.
pub struct ScoreCache {
    provider_id: String,
    phi: Vec<f64>,
    // Strict upper triangle, row-major: (i, j) with i < j.
    d: RwLock<Vec<Option<f64>>>,
    source: Option<LazySource>,
}

impl std::fmt::Debug for ScoreCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScoreCache")
            .field("provider_id", &self.provider_id)
            .field("len", &self.phi.len())
            .field("computed_pairs", &self.computed_pairs())
            .finish()
    }
}

fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

fn tri_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

impl ScoreCache {
    /// Builds a fully populated cache from explicit scores. `d` is a dense
    /// row-major `n × n` matrix that must be symmetric with a zero diagonal.
    pub fn from_dense(phi: Vec<f64>, d: &[f64], provider_id: &str) -> Result<Self, SimilarityError> {
        let n = phi.len();
        if d.len() != n * n {
            return Err(SimilarityError::InvalidScores(format!(
                "diversity matrix has {} entries, expected {}",
                d.len(),
                n * n
            )));
        }
        check_unit("phi", &phi)?;
        let mut tri = Vec::with_capacity(pair_count(n));
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return Err(SimilarityError::InvalidScores(format!("D({i},{i}) is not zero")));
            }
            for j in i + 1..n {
                let v = d[i * n + j];
                if v != d[j * n + i] {
                    return Err(SimilarityError::InvalidScores(format!("D({i},{j}) != D({j},{i})")));
                }
                tri.push(v);
            }
        }
        check_unit("D", &tri)?;
        Ok(ScoreCache {
            provider_id: provider_id.to_string(),
            phi,
            d: RwLock::new(tri.into_iter().map(Some).collect()),
            source: None,
        })
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    /// Number of pairwise entries present.
    pub fn computed_pairs(&self) -> usize {
        self.d
            .read()
            .expect("score cache poisoned")
            .iter()
            .filter(|e| e.is_some())
            .count()
    }

    /// The stored value of `D(i, j)` without computing it.
    pub fn peek(&self, i: usize, j: usize) -> Option<f64> {
        let n = self.len();
        if i >= n || j >= n {
            return None;
        }
        if i == j {
            return Some(0.0);
        }
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.d.read().expect("score cache poisoned")[tri_index(n, a, b)]
    }

    /// `D(i, j)`, computing and storing it first in lazy mode.
    pub fn diversity(&self, i: usize, j: usize) -> Result<f64, SimilarityError> {
        let n = self.len();
        for idx in [i, j] {
            if idx >= n {
                return Err(SimilarityError::OutOfRange { index: idx, len: n });
            }
        }
        if let Some(v) = self.peek(i, j) {
            return Ok(v);
        }
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        let src = self
            .source
            .as_ref()
            .ok_or_else(|| SimilarityError::InvalidScores(format!("D({a},{b}) missing and no source to compute it")))?;
        let v = pair_diversity(src, a, b)?;
        let mut d = self.d.write().expect("score cache poisoned");
        let slot = &mut d[tri_index(n, a, b)];
        Ok(*slot.get_or_insert(v))
    }

    /// Fills every missing entry using `provider`, which must be the provider
    /// the cache was built with.
    pub fn complete_with(&self, provider: &dyn SimilarityProvider) -> Result<(), SimilarityError> {
        if provider.id() != self.provider_id {
            return Err(SimilarityError::ProviderMismatch {
                expected: self.provider_id.clone(),
                found: provider.id().to_string(),
            });
        }
        let src = self
            .source
            .as_ref()
            .ok_or_else(|| SimilarityError::InvalidScores("cache has no texts to compute from".into()))?;
        let n = self.len();
        let missing: Vec<(usize, usize)> = {
            let d = self.d.read().expect("score cache poisoned");
            (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .filter(|&(i, j)| d[tri_index(n, i, j)].is_none())
                .collect()
        };
        let values = batch_diversity(provider, &src.states, &src.answers, &missing)?;
        let mut d = self.d.write().expect("score cache poisoned");
        for ((i, j), v) in missing.into_iter().zip(values) {
            d[tri_index(n, i, j)].get_or_insert(v);
        }
        Ok(())
    }

    /// Dense row-major `n × n` diversity matrix, computing any missing entries.
    pub fn dense(&self) -> Result<Vec<f64>, SimilarityError> {
        let n = self.len();
        if self.computed_pairs() < pair_count(n) {
            if let Some(src) = &self.source {
                let provider = Arc::clone(&src.provider);
                self.complete_with(provider.as_ref())?;
            }
        }
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = self.diversity(i, j)?;
                out[i * n + j] = v;
                out[j * n + i] = v;
            }
        }
        Ok(out)
    }
}

fn check_unit(name: &str, xs: &[f64]) -> Result<(), SimilarityError> {
    match xs.iter().position(|x| !(0.0..=1.0).contains(x)) {
        Some(i) => Err(SimilarityError::InvalidScores(format!(
            "{name}[{i}] = {} outside [0, 1]",
            xs[i]
        ))),
        None => Ok(()),
    }
}

fn pair_diversity(src: &LazySource, i: usize, j: usize) -> Result<f64, SimilarityError> {
    let s = src
        .provider
        .sim_many(&[(&src.states[i], &src.states[j]), (&src.answers[i], &src.answers[j])])?;
    Ok(diversity_from_sims(s[0], s[1]))
}

fn batch_diversity(
    provider: &dyn SimilarityProvider,
    states: &[String],
    answers: &[String],
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>, SimilarityError> {
    let queries: Vec<(&str, &str)> = pairs
        .iter()
        .flat_map(|&(i, j)| {
            [
                (states[i].as_str(), states[j].as_str()),
                (answers[i].as_str(), answers[j].as_str()),
            ]
        })
        .collect();
    let sims = provider.sim_many(&queries)?;
    Ok(sims.chunks(2).map(|c| diversity_from_sims(c[0], c[1])).collect())
}

/// Builds a cache over explicit texts: `phi[t] = sim(goal, states[t])`, and
/// diversity over `(states, answers)`.
pub fn build_cache_from_texts(
    goal: &str,
    states: Vec<String>,
    answers: Vec<String>,
    provider: Arc<dyn SimilarityProvider>,
    mode: CacheMode,
) -> Result<ScoreCache, SimilarityError> {
    assert_eq!(states.len(), answers.len(), "one answer per state");
    let n = states.len();
    let queries: Vec<(&str, &str)> = states.iter().map(|s| (goal, s.as_str())).collect();
    let phi = provider.sim_many(&queries)?;
    check_unit("phi", &phi)?;
    let cache = ScoreCache {
        provider_id: provider.id().to_string(),
        phi,
        d: RwLock::new(vec![None; pair_count(n)]),
        source: Some(LazySource {
            states,
            answers,
            provider: Arc::clone(&provider),
        }),
    };
    if mode == CacheMode::Eager {
        cache.complete_with(provider.as_ref())?;
    }
    Ok(cache)
}

/// Builds a cache over a trajectory's raw states and answers.
pub fn build_cache(
    trajectory: &Trajectory,
    provider: Arc<dyn SimilarityProvider>,
    mode: CacheMode,
) -> Result<ScoreCache, SimilarityError> {
    build_cache_from_texts(
        &trajectory.goal,
        trajectory.steps.iter().map(|s| s.state_raw.clone()).collect(),
        trajectory.steps.iter().map(|s| s.answer.clone()).collect(),
        provider,
        mode,
    )
}
