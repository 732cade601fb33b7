//! Engine configuration.
//!
//! Values are layered: a TOML config file, then the `MASKEVAL_BACKEND_URL`
//! and `MASKEVAL_SEED` environment variables, then command-line flags (the
//! CLI applies those last).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError, HttpBackend, HttpConfig, MockBackend, RetryPolicy};
use crate::masking::{MaskingError, WindowConfig};
use crate::pipeline::ScoringConfig;

pub const ENV_BACKEND_URL: &str = "MASKEVAL_BACKEND_URL";
pub const ENV_SEED: &str = "MASKEVAL_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Toml {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid value for {var}: {value:?}")]
    Env { var: &'static str, value: String },
    #[error(transparent)]
    Window(#[from] MaskingError),
    #[error("invalid backend configuration: {0}")]
    Backend(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    /// Always predicts the ground truth.
    MockEcho,
    /// Never predicts the ground truth.
    MockWrong,
    /// Predicts the ground truth with probability `mock_accuracy`.
    MockHashed,
    Http,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock-echo" => Ok(Self::MockEcho),
            "mock-wrong" => Ok(Self::MockWrong),
            "mock-hashed" => Ok(Self::MockHashed),
            "http" => Ok(Self::Http),
            other => Err(format!(
                "unknown backend {other:?} (expected mock-echo, mock-wrong, mock-hashed or http)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub url: String,
    pub timeout_ms: u64,
    pub retries: u32,
    pub retry_base_delay_ms: u64,
    pub max_inflight: usize,
    pub mock_accuracy: f64,
    pub mock_dim: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::MockEcho,
            url: HttpConfig::default().base_url,
            timeout_ms: HttpConfig::default().timeout_ms,
            retries: RetryPolicy::default().attempts,
            retry_base_delay_ms: RetryPolicy::default().base_delay_ms,
            max_inflight: 4,
            mock_accuracy: 0.5,
            mock_dim: MockBackend::DEFAULT_DIM,
        }
    }
}

impl BackendConfig {
    /// Mock embeddings are keyed by `seed`.
    pub fn build(&self, seed: u64) -> Result<Box<dyn Backend>, ConfigError> {
        let mock = |m: MockBackend| -> Result<Box<dyn Backend>, ConfigError> {
            if self.mock_dim == 0 {
                return Err(ConfigError::Backend("mock_dim must be positive".into()));
            }
            Ok(Box::new(m.with_dim(self.mock_dim).with_seed(seed)))
        };
        match self.kind {
            BackendKind::MockEcho => mock(MockBackend::echo()),
            BackendKind::MockWrong => mock(MockBackend::wrong()),
            BackendKind::MockHashed => {
                if !(0.0..=1.0).contains(&self.mock_accuracy) {
                    return Err(ConfigError::Backend(format!(
                        "mock_accuracy {} outside [0, 1]",
                        self.mock_accuracy
                    )));
                }
                mock(MockBackend::hashed(self.mock_accuracy))
            }
            BackendKind::Http => {
                let cfg = HttpConfig {
                    base_url: self.url.clone(),
                    timeout_ms: self.timeout_ms,
                };
                Ok(Box::new(HttpBackend::new(&cfg).map_err(
                    |e: BackendError| ConfigError::Backend(e.to_string()),
                )?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub window: WindowConfig,
    pub backend: BackendConfig,
    pub weighter_path: Option<PathBuf>,
    pub seed: u64,
    pub renormalize_selective: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            backend: BackendConfig::default(),
            weighter_path: None,
            seed: 0,
            renormalize_selective: true,
        }
    }
}

impl EngineConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Toml {
            path: path.into(),
            source,
        })
    }

    /// Overlay environment variables, read through `lookup`.
    pub fn apply_env(
        &mut self,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<(), ConfigError> {
        if let Some(url) = lookup(ENV_BACKEND_URL) {
            self.backend.url = url;
        }
        if let Some(seed) = lookup(ENV_SEED) {
            self.seed = seed.trim().parse().map_err(|_| ConfigError::Env {
                var: ENV_SEED,
                value: seed,
            })?;
        }
        Ok(())
    }

    /// File (if any) then process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.window.validate()?;
        if self.backend.max_inflight == 0 {
            return Err(ConfigError::Backend(
                "max_inflight must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            window: self.window.clone(),
            retry: RetryPolicy {
                attempts: self.backend.retries,
                base_delay_ms: self.backend.retry_base_delay_ms,
            },
            max_inflight: self.backend.max_inflight,
            renormalize_selective: self.renormalize_selective,
        }
    }
}
