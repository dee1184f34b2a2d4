use std::collections::{HashMap, HashSet};

use super::{SimilarityError, SimilarityProvider};

/// Jaccard similarity over lowercased whitespace tokens. Two empty texts are
/// identical (1.0); one empty text shares nothing (0.0).
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapBackend;

impl OverlapBackend {
    pub const ID: &'static str = "overlap:jaccard-lowercase-whitespace";

    pub fn jaccard(a: &str, b: &str) -> f64 {
        jaccard_sets(&tokens(a), &tokens(b))
    }
}

fn tokens(text: &str) -> HashSet<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn jaccard_sets(ta: &HashSet<String>, tb: &HashSet<String>) -> f64 {
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    let (small, large) = if ta.len() <= tb.len() { (ta, tb) } else { (tb, ta) };
    let inter = small.iter().filter(|t| large.contains(*t)).count();
    let union = ta.len() + tb.len() - inter;
    inter as f64 / union as f64
}

impl SimilarityProvider for OverlapBackend {
    fn id(&self) -> &str {
        Self::ID
    }

    fn sim(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
        Ok(Self::jaccard(a, b))
    }

    /// Tokenizes each distinct text once per batch.
    fn sim_many(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, SimilarityError> {
        let mut sets: HashMap<&str, HashSet<String>> = HashMap::new();
        for (a, b) in pairs {
            for t in [*a, *b] {
                sets.entry(t).or_insert_with(|| tokens(t));
            }
        }
        Ok(pairs.iter().map(|(a, b)| jaccard_sets(&sets[a], &sets[b])).collect())
    }
}
