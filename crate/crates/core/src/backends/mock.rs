use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{fold, Backend, BackendError, Prediction, TokenEmbeddings};
use crate::masking::{MaskedSequence, Side};

/// How the mock fills in a mask.
#[derive(Debug, Clone, PartialEq)]
pub enum MockPredictor {
    /// Always returns the ground-truth word.
    Echo,
    /// Never returns the ground-truth word.
    Wrong,
    /// Fixed answers per `(side, word_index)`; other steps echo if
    /// `echo_missing`, otherwise miss.
    Table {
        entries: HashMap<(Side, usize), String>,
        echo_missing: bool,
    },
    /// Echoes the truth with probability `accuracy`, decided by a hash of
    /// the masked sequence so repeated calls agree.
    Hashed { accuracy: f64 },
}

/// Deterministic in-process backend. Immutable after construction.
#[derive(Debug, Clone)]
pub struct MockBackend {
    predictor: MockPredictor,
    dim: usize,
    seed: u64,
}

impl MockBackend {
    pub const DEFAULT_DIM: usize = 16;

    pub fn new(predictor: MockPredictor) -> Self {
        Self {
            predictor,
            dim: Self::DEFAULT_DIM,
            seed: 0,
        }
    }

    pub fn echo() -> Self {
        Self::new(MockPredictor::Echo)
    }

    pub fn wrong() -> Self {
        Self::new(MockPredictor::Wrong)
    }

    pub fn hashed(accuracy: f64) -> Self {
        Self::new(MockPredictor::Hashed { accuracy })
    }

    pub fn table(entries: HashMap<(Side, usize), String>, echo_missing: bool) -> Self {
        Self::new(MockPredictor::Table {
            entries,
            echo_missing,
        })
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        self.dim = dim;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The embedding of `token` at absolute `position`: a vector seeded from
    /// SHA-256 of (seed, position, token), uniform in [-1, 1) per component,
    /// then scaled to unit length.
    pub fn embedding(&self, token: &str, position: usize) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(b"maskeval-mock-embed");
        hasher.update(self.seed.to_le_bytes());
        hasher.update((position as u64).to_le_bytes());
        hasher.update(token.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    fn hashed_hit(&self, seq: &MaskedSequence, accuracy: f64) -> bool {
        let mut hasher = Sha256::new();
        hasher.update(b"maskeval-mock-predict");
        hasher.update(self.seed.to_le_bytes());
        hasher.update([seq.side as u8]);
        hasher.update((seq.word_index as u64).to_le_bytes());
        hasher.update(seq.truth.as_bytes());
        for t in &seq.tokens {
            hasher.update([0x1f]);
            hasher.update(t.as_bytes());
        }
        let digest = hasher.finalize();
        let bits = u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
        ((bits >> 11) as f64 / (1u64 << 53) as f64) < accuracy
    }
}

fn miss(truth: &str) -> String {
    if fold(truth) == "\u{2205}" {
        "\u{2205}\u{2205}".into()
    } else {
        "\u{2205}".into()
    }
}

impl Backend for MockBackend {
    fn predict(&self, seq: &MaskedSequence) -> Result<Prediction, BackendError> {
        let word = match &self.predictor {
            MockPredictor::Echo => seq.truth.clone(),
            MockPredictor::Wrong => miss(&seq.truth),
            MockPredictor::Table {
                entries,
                echo_missing,
            } => match entries.get(&(seq.side, seq.word_index)) {
                Some(w) => w.clone(),
                None if *echo_missing => seq.truth.clone(),
                None => miss(&seq.truth),
            },
            MockPredictor::Hashed { accuracy } => {
                if self.hashed_hit(seq, *accuracy) {
                    seq.truth.clone()
                } else {
                    miss(&seq.truth)
                }
            }
        };
        Prediction::new(word)
    }

    fn embed_tokens(&self, tokens: &[String]) -> Result<TokenEmbeddings, BackendError> {
        let rows = tokens
            .iter()
            .enumerate()
            .map(|(k, t)| self.embedding(t, k))
            .collect();
        TokenEmbeddings::from_rows(self.dim, rows)
    }
}
