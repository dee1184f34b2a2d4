//! Client for an embedding sidecar.
//!
//! Protocol: `GET /health` returns `{"model_id": str, "dim": n}`;
//! `POST /embed` with `{"texts": [str]}` returns `{"vectors": [[f64]]}` in the
//! request order. Embeddings are cached per exact text for the backend's
//! lifetime.

use std::collections::HashMap;
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::embedding::cosine01;
use super::{clamp_score, SimilarityError, SimilarityProvider};

const BATCH_SIZE: usize = 64;

#[derive(Debug, Deserialize)]
struct Health {
    model_id: String,
    dim: usize,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

pub struct RemoteBackend {
    base: String,
    id: String,
    dim: usize,
    agent: ureq::Agent,
    vectors: RwLock<HashMap<String, Vec<f64>>>,
    // One in-flight batch per endpoint.
    request_lock: Mutex<()>,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend").field("id", &self.id).finish()
    }
}

impl RemoteBackend {
    /// Connects to the sidecar and reads its model identity.
    pub fn connect(endpoint: &str) -> Result<Self, SimilarityError> {
        let base = endpoint.trim_end_matches('/').to_string();
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build();
        let health: Health = agent
            .get(&format!("{base}/health"))
            .call()
            .map_err(|e| backend_err(&base, e.to_string()))?
            .into_json()
            .map_err(|e| backend_err(&base, format!("bad /health body: {e}")))?;
        Ok(RemoteBackend {
            id: format!("remote:{}:dim{}:affine01", health.model_id, health.dim),
            dim: health.dim,
            base,
            agent,
            vectors: RwLock::new(HashMap::new()),
            request_lock: Mutex::new(()),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Fetches embeddings for every text not already cached.
    pub fn prefetch(&self, texts: &[&str]) -> Result<(), SimilarityError> {
        let missing: Vec<&str> = {
            let cache = self.vectors.read().expect("embedding cache poisoned");
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .copied()
                .filter(|t| !cache.contains_key(*t) && seen.insert(*t))
                .collect()
        };
        if missing.is_empty() {
            return Ok(());
        }
        let _guard = self.request_lock.lock().expect("request lock poisoned");
        for chunk in missing.chunks(BATCH_SIZE) {
            let resp: EmbedResponse = self
                .agent
                .post(&format!("{}/embed", self.base))
                .send_json(EmbedRequest { texts: chunk })
                .map_err(|e| backend_err(&self.id, e.to_string()))?
                .into_json()
                .map_err(|e| backend_err(&self.id, format!("bad /embed body: {e}")))?;
            if resp.vectors.len() != chunk.len() {
                return Err(backend_err(
                    &self.id,
                    format!("sent {} texts, got {} vectors", chunk.len(), resp.vectors.len()),
                ));
            }
            if let Some(v) = resp.vectors.iter().find(|v| v.len() != self.dim) {
                return Err(backend_err(
                    &self.id,
                    format!("vector of dimension {} from a dim {} server", v.len(), self.dim),
                ));
            }
            let mut cache = self.vectors.write().expect("embedding cache poisoned");
            for (t, v) in chunk.iter().zip(resp.vectors) {
                cache.insert((*t).to_string(), v);
            }
        }
        Ok(())
    }

    fn score(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
        let cache = self.vectors.read().expect("embedding cache poisoned");
        let va = cache
            .get(a)
            .ok_or_else(|| backend_err(&self.id, "embedding not fetched".into()))?;
        let vb = cache
            .get(b)
            .ok_or_else(|| backend_err(&self.id, "embedding not fetched".into()))?;
        clamp_score(&self.id, cosine01(va, vb))
    }
}

fn backend_err(provider: &str, message: String) -> SimilarityError {
    SimilarityError::Backend {
        provider: provider.to_string(),
        message,
    }
}

impl SimilarityProvider for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn sim(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
        self.prefetch(&[a, b])?;
        self.score(a, b)
    }

    fn sim_many(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, SimilarityError> {
        let texts: Vec<&str> = pairs.iter().flat_map(|(a, b)| [*a, *b]).collect();
        self.prefetch(&texts)?;
        pairs.iter().map(|(a, b)| self.score(a, b)).collect()
    }
}
