//! Masked sequence construction.
//!
//! For a candidate `x` with `N` words and a source `y` with `M` words this
//! builds `N + M` sequences of the form `x <sep> y`, each with one word
//! replaced by a single mask sentinel. The text holding the mask is cut to a
//! window around it, then the other text is cut so the whole sequence fits
//! the model's length budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmentation::SegmentedText;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Candidate,
    Source,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Candidate => "candidate",
            Side::Source => "source",
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskingError {
    #[error("both texts of the pair are empty")]
    EmptyPair,
    #[error("the {0} text is empty")]
    EmptySide(Side),
    #[error("invalid window configuration: {0}")]
    InvalidConfig(String),
}

/// Which end of the non-masked text survives truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Truncation {
    #[default]
    KeepHead,
    KeepTail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub window_radius: usize,
    pub max_sequence_length: usize,
    pub mask_sentinel: String,
    pub separator_sentinel: String,
    pub truncation: Truncation,
    /// Keep the separator even when the other text is truncated away entirely.
    pub keep_separator_when_empty: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_radius: 24,
            max_sequence_length: 512,
            mask_sentinel: "<extra_id_0>".to_string(),
            separator_sentinel: "<sep>".to_string(),
            truncation: Truncation::KeepHead,
            keep_separator_when_empty: true,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), MaskingError> {
        if self.window_radius == 0 {
            return Err(MaskingError::InvalidConfig(
                "window_radius must be at least 1".into(),
            ));
        }
        if self.max_sequence_length <= 2 * self.window_radius + 2 {
            return Err(MaskingError::InvalidConfig(format!(
                "max_sequence_length {} must exceed 2 * window_radius + 2 = {}",
                self.max_sequence_length,
                2 * self.window_radius + 2
            )));
        }
        if self.mask_sentinel.is_empty() || self.separator_sentinel.is_empty() {
            return Err(MaskingError::InvalidConfig(
                "sentinels must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// A candidate/source pair after word segmentation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSegmentation {
    pub candidate: SegmentedText,
    pub source: SegmentedText,
}

impl PairSegmentation {
    pub fn new(candidate: SegmentedText, source: SegmentedText) -> Self {
        Self { candidate, source }
    }

    pub fn side(&self, side: Side) -> &SegmentedText {
        match side {
            Side::Candidate => &self.candidate,
            Side::Source => &self.source,
        }
    }

    /// Total number of masking steps, `N + M`.
    pub fn step_count(&self) -> usize {
        self.candidate.len() + self.source.len()
    }

    /// All `(side, word_index)` steps, candidate words first.
    pub fn steps(&self) -> impl Iterator<Item = (Side, usize)> + '_ {
        (0..self.candidate.len())
            .map(|i| (Side::Candidate, i))
            .chain((0..self.source.len()).map(|j| (Side::Source, j)))
    }
}

/// One masked-prediction input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSequence {
    pub tokens: Vec<String>,
    pub mask_index: usize,
    pub side: Side,
    pub word_index: usize,
    pub truth: String,
}

/// Token sequence produced by [`apply_window`] with the position of the mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Windowed {
    pub tokens: Vec<String>,
    pub mask_index: usize,
}

/// Cut the masked text to `window_radius` tokens either side of the mask,
/// then cut the other text so the full `x <sep> y` sequence fits in
/// `max_sequence_length`. Sentinels count against the budget.
pub fn apply_window(
    masked_text: &[String],
    mask_pos: usize,
    other_text: &[String],
    masked_side: Side,
    cfg: &WindowConfig,
) -> Windowed {
    debug_assert!(mask_pos < masked_text.len());
    let lo = mask_pos.saturating_sub(cfg.window_radius);
    let hi = (mask_pos + cfg.window_radius + 1).min(masked_text.len());
    let window = &masked_text[lo..hi];

    let room = cfg.max_sequence_length.saturating_sub(window.len() + 1);
    let keep = other_text.len().min(room);
    let other = match cfg.truncation {
        Truncation::KeepHead => &other_text[..keep],
        Truncation::KeepTail => &other_text[other_text.len() - keep..],
    };
    let sep = if other.is_empty() && !cfg.keep_separator_when_empty {
        None
    } else {
        Some(cfg.separator_sentinel.clone())
    };

    let mut tokens = Vec::with_capacity(window.len() + other.len() + 1);
    let mask_index = match masked_side {
        Side::Candidate => {
            tokens.extend_from_slice(window);
            tokens.extend(sep);
            tokens.extend_from_slice(other);
            mask_pos - lo
        }
        Side::Source => {
            tokens.extend_from_slice(other);
            tokens.extend(sep);
            let offset = tokens.len();
            tokens.extend_from_slice(window);
            offset + mask_pos - lo
        }
    };
    Windowed { tokens, mask_index }
}

fn mask_word(
    pair: &PairSegmentation,
    side: Side,
    word_index: usize,
    cfg: &WindowConfig,
) -> MaskedSequence {
    let text = pair.side(side);
    let other = match side {
        Side::Candidate => &pair.source,
        Side::Source => &pair.candidate,
    };
    let word = &text.words()[word_index];
    let first = word.subtoken_ids[0];
    let last = *word
        .subtoken_ids
        .last()
        .expect("word has at least one subtoken");

    let tokens = text.subtokens();
    let mut masked = Vec::with_capacity(tokens.len() - (last - first));
    masked.extend_from_slice(&tokens[..first]);
    masked.push(cfg.mask_sentinel.clone());
    masked.extend_from_slice(&tokens[last + 1..]);

    let windowed = apply_window(&masked, first, other.subtokens(), side, cfg);
    MaskedSequence {
        tokens: windowed.tokens,
        mask_index: windowed.mask_index,
        side,
        word_index,
        truth: text.word_text(word_index).to_string(),
    }
}

/// Build one masked sequence per word, candidate words first.
pub fn build_masked_sequences(
    pair: &PairSegmentation,
    cfg: &WindowConfig,
) -> Result<Vec<MaskedSequence>, MaskingError> {
    cfg.validate()?;
    if pair.step_count() == 0 {
        return Err(MaskingError::EmptyPair);
    }
    Ok(pair
        .steps()
        .map(|(side, i)| mask_word(pair, side, i, cfg))
        .collect())
}

/// Build the masked sequence for a single step.
pub fn build_masked_sequence(
    pair: &PairSegmentation,
    side: Side,
    word_index: usize,
    cfg: &WindowConfig,
) -> Result<MaskedSequence, MaskingError> {
    cfg.validate()?;
    if word_index >= pair.side(side).len() {
        return Err(MaskingError::EmptySide(side));
    }
    Ok(mask_word(pair, side, word_index, cfg))
}

/// One fine-tuning example for the external masked language model: a
/// uniformly chosen side, then a uniformly chosen word on that side.
pub fn gen_mlm_training_example(
    pair: &PairSegmentation,
    seed: u64,
    cfg: &WindowConfig,
) -> Result<MaskedSequence, MaskingError> {
    cfg.validate()?;
    for side in [Side::Candidate, Side::Source] {
        if pair.side(side).is_empty() {
            return Err(MaskingError::EmptySide(side));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = if rng.random_bool(0.5) {
        Side::Candidate
    } else {
        Side::Source
    };
    let word_index = rng.random_range(0..pair.side(side).len());
    Ok(mask_word(pair, side, word_index, cfg))
}

/// Line format of the `gen-mlm-data` output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlmTrainingRecord {
    pub input_tokens: Vec<String>,
    pub target_word: String,
    pub side: Side,
    pub word_index: usize,
    pub pair_id: String,
}

impl MlmTrainingRecord {
    pub fn new(pair_id: impl Into<String>, seq: MaskedSequence) -> Self {
        Self {
            input_tokens: seq.tokens,
            target_word: seq.truth,
            side: seq.side,
            word_index: seq.word_index,
            pair_id: pair_id.into(),
        }
    }
}
