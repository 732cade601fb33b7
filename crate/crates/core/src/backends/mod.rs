//! Model capabilities behind a uniform contract.
//!
//! The engine needs two things from a language model: fill-in predictions
//! for a masked word, and per-token contextual embeddings of the
//! concatenated pair. [`MockBackend`] provides deterministic stand-ins for
//! tests; [`HttpBackend`] talks to a model service over JSON.

mod http;
mod mock;

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::{MaskedSequence, Side};

pub use http::{
    strip_sentinels, EmbedRequest, EmbedResponse, HttpBackend, HttpConfig, PredictRequest,
    PredictResponse, PROTOCOL_VERSION,
};
pub use mock::{MockBackend, MockPredictor};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Unavailable(_))
    }
}

/// The model's filled-in word for a mask position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    word: String,
}

impl Prediction {
    pub fn new(word: impl Into<String>) -> Result<Self, BackendError> {
        let word = word.into();
        if word.trim().is_empty() {
            return Err(BackendError::MalformedResponse("empty prediction".into()));
        }
        Ok(Self { word })
    }

    pub fn word(&self) -> &str {
        &self.word
    }
}

/// One `dim`-vector per input token, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    dim: usize,
    data: Vec<f64>,
}

impl TokenEmbeddings {
    pub fn from_rows(dim: usize, rows: Vec<Vec<f64>>) -> Result<Self, BackendError> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (k, row) in rows.into_iter().enumerate() {
            if row.len() != dim {
                return Err(BackendError::MalformedResponse(format!(
                    "embedding {k} has length {}, expected {dim}",
                    row.len()
                )));
            }
            data.extend(row);
        }
        Self::from_flat(dim, data)
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self, BackendError> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(BackendError::MalformedResponse(format!(
                "bad embedding shape: {} values, dim {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::MalformedResponse(
                "non-finite embedding value".into(),
            ));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Same embeddings with every value multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Binary exact-match outcome for one masked word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StepScore {
    pub side: Side,
    pub word_index: usize,
    pub value: u8,
}

/// Lowercase and trim, locale-independently.
pub fn fold(s: &str) -> String {
    s.trim().to_lowercase()
}

/// 1 iff the two strings agree after trimming and lowercasing.
pub fn exact_match(truth: &str, pred: &str) -> u8 {
    u8::from(fold(truth) == fold(pred))
}

/// Capabilities a scoring backend must provide. Implementations are shared
/// across worker threads.
pub trait Backend: Send + Sync {
    fn predict(&self, seq: &MaskedSequence) -> Result<Prediction, BackendError>;

    /// Embed an already concatenated `x <sep> y` token sequence.
    fn embed_tokens(&self, tokens: &[String]) -> Result<TokenEmbeddings, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn predict(&self, seq: &MaskedSequence) -> Result<Prediction, BackendError> {
        (**self).predict(seq)
    }

    fn embed_tokens(&self, tokens: &[String]) -> Result<TokenEmbeddings, BackendError> {
        (**self).embed_tokens(tokens)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn predict(&self, seq: &MaskedSequence) -> Result<Prediction, BackendError> {
        (**self).predict(seq)
    }

    fn embed_tokens(&self, tokens: &[String]) -> Result<TokenEmbeddings, BackendError> {
        (**self).embed_tokens(tokens)
    }
}

/// Embed `candidate <sep> source`, checking one vector comes back per token.
pub fn embed(
    backend: &dyn Backend,
    candidate: &[String],
    source: &[String],
    separator: &str,
) -> Result<TokenEmbeddings, BackendError> {
    let mut tokens = Vec::with_capacity(candidate.len() + source.len() + 1);
    tokens.extend_from_slice(candidate);
    tokens.push(separator.to_string());
    tokens.extend_from_slice(source);
    let emb = backend.embed_tokens(&tokens)?;
    if emb.len() != tokens.len() {
        return Err(BackendError::MalformedResponse(format!(
            "expected {} embeddings, got {}",
            tokens.len(),
            emb.len()
        )));
    }
    Ok(emb)
}

/// Exponential backoff on [`BackendError::Unavailable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay_ms: 100,
        }
    }
}

impl RetryPolicy {
    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// attempts run out. Every failed attempt is passed to `on_failure`.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, BackendError>,
        mut on_failure: impl FnMut(u32, &BackendError),
    ) -> Result<T, BackendError> {
        let attempts = self.attempts.max(1);
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) => {
                    attempt += 1;
                    on_failure(attempt, &e);
                    if !e.is_retryable() || attempt >= attempts {
                        return Err(e);
                    }
                    let delay = self
                        .base_delay_ms
                        .saturating_mul(1 << (attempt - 1).min(16));
                    thread::sleep(Duration::from_millis(delay));
                }
            }
        }
    }
}
