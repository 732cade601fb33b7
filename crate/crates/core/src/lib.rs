//! Reference-less evaluation of summaries and simplifications.
//!
//! A candidate text is scored against its source by masking every word of
//! the concatenated pair in turn, asking a masked language model to fill it
//! in, and scoring each prediction by exact match. Per-word scores are
//! combined with per-text normalized weights: uniform, candidate-only, or
//! learned from human judgments for a given quality dimension.
//!
//! Module map:
//!
//! - [`segmentation`]: reconcile linguistic and subword tokenizations into words
//! - [`masking`]: build the windowed masked sequences
//! - [`backends`]: model contract, mock and HTTP implementations, exact match
//! - [`weighter`]: weighting schemes, aggregation, loss, gradient, training
//! - [`pipeline`]: pair scoring, selective masking, correlation, POS analysis
//! - [`data`] and [`config`]: dataset files and engine configuration

pub mod backends;
pub mod config;
pub mod data;
pub mod masking;
pub mod optim;
pub mod pipeline;
pub mod segmentation;
pub mod stats;
pub mod synthetic;
pub mod weighter;

pub use backends::{
    exact_match, Backend, BackendError, MockBackend, Prediction, StepScore, TokenEmbeddings,
};
pub use data::{load_dataset, scale_human_score, Dataset, DatasetHeader, EvalRecord, HumanScale};
pub use masking::{build_masked_sequences, MaskedSequence, PairSegmentation, Side, WindowConfig};
pub use pipeline::{
    score_pair, selective_score, CorrelationReport, GlobalWeight, PreparedPair, ScoreReport,
    ScoringConfig, WeightingScheme,
};
pub use segmentation::{reconcile, Segmentation, SegmentedText, Span};
pub use weighter::{WeightAssignment, WeighterParams};

/// Derive an independent 64-bit seed for stream `index` from `seed`
/// (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
