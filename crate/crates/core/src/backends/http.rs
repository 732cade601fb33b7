//! JSON-over-HTTP model service client.
//!
//! Wire protocol, version 1 (sent as the `X-Maskeval-Protocol` header):
//!
//! ```text
//! POST {base}/predict   {"tokens": [..], "mask_index": 3}   ->  {"word": ".."}
//! POST {base}/embed     {"tokens": [..]}                    ->  {"vectors": [[..], ..]}
//! ```
//!
//! Connection errors, timeouts, 429 and 5xx map to
//! [`BackendError::Unavailable`]; anything else that does not follow the
//! protocol is [`BackendError::MalformedResponse`].

use std::sync::LazyLock;
use std::time::Duration;

use regex::Regex;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, Prediction, TokenEmbeddings};
use crate::masking::MaskedSequence;

pub const PROTOCOL_VERSION: u32 = 1;
const PROTOCOL_HEADER: &str = "X-Maskeval-Protocol";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub tokens: Vec<String>,
    pub mask_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub word: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub base_url: String,
    pub timeout_ms: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8080".into(),
            timeout_ms: 30_000,
        }
    }
}

static SENTINEL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"<extra_id_\d+>|<pad>|</s>").expect("valid sentinel pattern"));

/// Remove T5-style span sentinels and padding from generated text, e.g.
/// `"<extra_id_0> sat <extra_id_1>"` becomes `"sat"`.
pub fn strip_sentinels(text: &str) -> String {
    SENTINEL
        .replace_all(text, " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: Client,
    predict_url: String,
    embed_url: String,
}

impl HttpBackend {
    pub fn new(cfg: &HttpConfig) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| BackendError::Unavailable(format!("cannot build HTTP client: {e}")))?;
        let base = cfg.base_url.trim_end_matches('/');
        Ok(Self {
            client,
            predict_url: format!("{base}/predict"),
            embed_url: format!("{base}/embed"),
        })
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        url: &str,
        body: &Req,
    ) -> Result<Resp, BackendError> {
        let resp = self
            .client
            .post(url)
            .header(PROTOCOL_HEADER, PROTOCOL_VERSION.to_string())
            .json(body)
            .send()
            .map_err(|e| BackendError::Unavailable(format!("{url}: {e}")))?;
        let status = resp.status();
        if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
            return Err(BackendError::Unavailable(format!("{url}: HTTP {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::MalformedResponse(format!(
                "{url}: HTTP {status}"
            )));
        }
        let bytes = resp
            .bytes()
            .map_err(|e| BackendError::Unavailable(format!("{url}: {e}")))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| BackendError::MalformedResponse(format!("{url}: {e}")))
    }
}

impl Backend for HttpBackend {
    fn predict(&self, seq: &MaskedSequence) -> Result<Prediction, BackendError> {
        let req = PredictRequest {
            tokens: seq.tokens.clone(),
            mask_index: seq.mask_index,
        };
        let resp: PredictResponse = self.post(&self.predict_url, &req)?;
        Prediction::new(strip_sentinels(&resp.word))
    }

    fn embed_tokens(&self, tokens: &[String]) -> Result<TokenEmbeddings, BackendError> {
        let resp: EmbedResponse = self.post(
            &self.embed_url,
            &EmbedRequest {
                tokens: tokens.to_vec(),
            },
        )?;
        let dim = resp.vectors.first().map_or(0, Vec::len);
        if resp.vectors.len() != tokens.len() {
            return Err(BackendError::MalformedResponse(format!(
                "expected {} vectors, got {}",
                tokens.len(),
                resp.vectors.len()
            )));
        }
        TokenEmbeddings::from_rows(dim, resp.vectors)
    }
}
