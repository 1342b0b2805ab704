//! Deterministic text embeddings and the subject-swap transformation.
//!
//! The built-in embedder is a bag-of-tokens hash: each token maps to a
//! seeded pseudo-random unit vector and a caption embeds as the normalized
//! sum. Captions sharing verbs land close in cosine similarity, which is the
//! property the training losses need. Externally computed vectors can be
//! substituted through a lookup table file without code changes.

use crate::rng::{hash_bytes, Rng};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("empty text")]
    EmptyText,
    #[error("no recognized subject phrase at the start of `{0}`")]
    SubjectNotFound(String),
    #[error("embedding table parse error: {0}")]
    ParseError(String),
    #[error("embedding has dimension {got}, table is configured for {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("caption not present in embedding table: `{0}`")]
    UnknownCaption(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub const DEFAULT_EMBED_DIM: usize = 512;
pub const DEFAULT_EMBED_SEED: u64 = 17;

/// Anything that maps caption strings to fixed-width vectors.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, TextError>;
}

/// Lowercase, strip punctuation to spaces, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder {
            dim: DEFAULT_EMBED_DIM,
            seed: DEFAULT_EMBED_SEED,
        }
    }
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashEmbedder { dim, seed }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = Rng::keyed(self.seed, &[hash_bytes(token.as_bytes())]);
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.near_gaussian()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        v
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, TextError> {
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(TextError::EmptyText);
        }
        // summation order must not depend on token order in the text
        tokens.sort_unstable();
        let mut sum = vec![0.0f64; self.dim];
        for tok in &tokens {
            for (s, v) in sum.iter_mut().zip(self.token_vector(tok)) {
                *s += v;
            }
        }
        let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut sum {
            *x /= norm;
        }
        Ok(sum)
    }
}

/// Replaces a recognized leading subject phrase with "a {animal}".
#[derive(Debug, Clone)]
pub struct SubjectSwapper {
    /// Checked longest-first; comparison is case-insensitive.
    pub subjects: Vec<String>,
}

impl Default for SubjectSwapper {
    fn default() -> Self {
        SubjectSwapper {
            subjects: ["a person", "the person", "a man", "a woman", "someone"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl SubjectSwapper {
    pub fn swap(&self, text: &str, animal: &str) -> Result<String, TextError> {
        let lower = text.to_lowercase();
        let mut phrases: Vec<&String> = self.subjects.iter().collect();
        phrases.sort_by_key(|p| std::cmp::Reverse(p.len()));
        for phrase in phrases {
            let p = phrase.to_lowercase();
            if lower.starts_with(&p) {
                let rest = &text[p.len()..];
                // require a word boundary so "a personal..." does not match
                if rest.is_empty() || rest.starts_with(char::is_whitespace) {
                    return Ok(format!("a {animal}{rest}"));
                }
            }
        }
        Err(TextError::SubjectNotFound(text.to_string()))
    }
}

pub fn subject_swap(text: &str, animal: &str) -> Result<String, TextError> {
    SubjectSwapper::default().swap(text, animal)
}

/// Exact-match caption table loaded from `caption<TAB>v1 v2 ... vN` lines.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn from_str(text: &str, dim: usize) -> Result<Self, TextError> {
        let mut entries = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (caption, rest) = line.split_once('\t').ok_or_else(|| {
                TextError::ParseError(format!("line {}: missing tab separator", lineno + 1))
            })?;
            let vec: Vec<f64> = rest
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|e| {
                        TextError::ParseError(format!("line {}: {e}", lineno + 1))
                    })
                })
                .collect::<Result<_, _>>()?;
            if vec.len() != dim {
                return Err(TextError::DimensionMismatch {
                    got: vec.len(),
                    want: dim,
                });
            }
            if vec.iter().map(|x| x * x).sum::<f64>() == 0.0 {
                return Err(TextError::ParseError(format!(
                    "line {}: zero-norm embedding",
                    lineno + 1
                )));
            }
            entries.insert(caption.to_string(), vec);
        }
        Ok(EmbeddingTable { dim, entries })
    }

    pub fn load(path: &Path, dim: usize) -> Result<Self, TextError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text, dim)
    }
}

impl EmbeddingProvider for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, TextError> {
        self.entries
            .get(text)
            .cloned()
            .ok_or_else(|| TextError::UnknownCaption(text.to_string()))
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_is_deterministic() {
        let e = HashEmbedder::default();
        let a = e.embed("a person is running").unwrap();
        let b = e.embed("a person is running").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), DEFAULT_EMBED_DIM);
    }

    #[test]
    fn token_order_does_not_matter() {
        let e = HashEmbedder::default();
        let a = e.embed("running person a is").unwrap();
        let b = e.embed("a person is running").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_text_rejected() {
        let e = HashEmbedder::default();
        assert!(matches!(e.embed("  ,! "), Err(TextError::EmptyText)));
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let e = HashEmbedder::default();
        for text in ["a person walks", "a dog jumps twice", "x"] {
            let v = e.embed(text).unwrap();
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_verbs_raise_cosine() {
        let e = HashEmbedder::default();
        let run_h = e.embed("a person is running").unwrap();
        let run_b = e.embed("a bear is running").unwrap();
        let sit_b = e.embed("a bear is sitting").unwrap();
        assert!(cosine(&run_h, &run_b) > cosine(&run_h, &sit_b));
    }

    #[test]
    fn subject_swap_basic() {
        assert_eq!(
            subject_swap("a person is running", "bear").unwrap(),
            "a bear is running"
        );
        assert_eq!(
            subject_swap("the person jumps twice", "dog").unwrap(),
            "a dog jumps twice"
        );
    }

    #[test]
    fn subject_swap_missing_subject() {
        assert!(matches!(
            subject_swap("running fast", "dog"),
            Err(TextError::SubjectNotFound(_))
        ));
    }

    #[test]
    fn subject_swap_requires_word_boundary() {
        assert!(subject_swap("a personal trainer runs", "dog").is_err());
    }

    #[test]
    fn subject_swap_idempotent_with_extended_list() {
        let mut sw = SubjectSwapper::default();
        sw.subjects.push("a bear".to_string());
        let once = sw.swap("a person is running", "bear").unwrap();
        let twice = sw.swap(&once, "bear").unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn table_round_trip_and_errors() {
        let table =
            EmbeddingTable::from_str("a person walks\t1.0 0.0 0.5\nanother\t0.1 0.2 0.3\n", 3)
                .unwrap();
        assert_eq!(table.embed("a person walks").unwrap(), vec![1.0, 0.0, 0.5]);
        assert!(matches!(
            table.embed("missing"),
            Err(TextError::UnknownCaption(_))
        ));
        assert!(matches!(
            EmbeddingTable::from_str("cap\t1.0 2.0\n", 3),
            Err(TextError::DimensionMismatch { got: 2, want: 3 })
        ));
        assert!(matches!(
            EmbeddingTable::from_str("no tab here\n", 3),
            Err(TextError::ParseError(_))
        ));
    }
}
