//! Word-level segmentation by intersecting token boundaries.
//!
//! A linguistic tokenizer and a model's subword tokenizer rarely agree on
//! where words start and end. A "word" here is any maximal run of tokens
//! that both tokenizations agree to split around: the word boundaries are
//! exactly the boundaries present in both inputs.
//!
//! ```text
//! text        Mr. Neverman's
//! linguistic  [Mr.] [Neverman]['s]
//! subword     [Mr][.] [Never][man]['][s]
//! words       [Mr.] [Neverman]['s]
//! ```
//!
//! All offsets are character (Unicode scalar) offsets into the text, not
//! byte offsets. Tokens never begin or end with whitespace, but may contain
//! it internally.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Half-open character range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "(usize, usize)", from = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Self { start, end }
    }
}

impl From<Span> for (usize, usize) {
    fn from(s: Span) -> Self {
        (s.start, s.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SegmentationError {
    #[error("invalid segmentation: span {index} {reason}")]
    InvalidSegmentation { index: usize, reason: &'static str },
    #[error("coverage mismatch: {which} tokens do not tile the text at character {offset}")]
    CoverageMismatch { which: &'static str, offset: usize },
}

/// Slice a string by character offsets.
pub(crate) fn char_slice(text: &str, span: Span) -> &str {
    let mut indices = text
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()));
    let start = indices.nth(span.start).unwrap_or(text.len());
    let end = if span.end > span.start {
        indices.nth(span.end - span.start - 1).unwrap_or(text.len())
    } else {
        start
    };
    &text[start..end]
}

/// A tokenization of a text given as sorted, non-overlapping character spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    text: String,
    spans: Vec<Span>,
}

impl Segmentation {
    /// Builds a segmentation, checking that spans are non-empty, sorted,
    /// non-overlapping, in bounds, and do not start or end on whitespace.
    ///
    /// Coverage of the text is not checked here; see [`Segmentation::check_tiling`].
    pub fn new(text: impl Into<String>, spans: Vec<Span>) -> Result<Self, SegmentationError> {
        let text = text.into();
        let chars: Vec<char> = text.chars().collect();
        let invalid = |index, reason| SegmentationError::InvalidSegmentation { index, reason };
        let mut prev_end = 0;
        for (i, s) in spans.iter().enumerate() {
            if s.start >= s.end {
                return Err(invalid(i, "is empty"));
            }
            if s.end > chars.len() {
                return Err(invalid(i, "is out of bounds"));
            }
            if i > 0 && s.start < prev_end {
                return Err(invalid(i, "overlaps or precedes the previous span"));
            }
            if chars[s.start].is_whitespace() || chars[s.end - 1].is_whitespace() {
                return Err(invalid(i, "begins or ends with whitespace"));
            }
            prev_end = s.end;
        }
        Ok(Self { text, spans })
    }

    /// Like [`Segmentation::new`], additionally requiring that the spans tile
    /// every non-whitespace character of the text.
    pub fn new_tiling(
        text: impl Into<String>,
        spans: Vec<Span>,
    ) -> Result<Self, SegmentationError> {
        let seg = Self::new(text, spans)?;
        seg.check_tiling("input")?;
        Ok(seg)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn token_text(&self, index: usize) -> &str {
        char_slice(&self.text, self.spans[index])
    }

    /// Every non-whitespace character must fall inside some span, and
    /// every gap between spans must be whitespace.
    pub fn check_tiling(&self, which: &'static str) -> Result<(), SegmentationError> {
        let mut spans = self.spans.iter().peekable();
        for (i, ch) in self.text.chars().enumerate() {
            while spans.next_if(|s| s.end <= i).is_some() {}
            let covered = spans.peek().is_some_and(|s| s.start <= i);
            if !covered && !ch.is_whitespace() {
                return Err(SegmentationError::CoverageMismatch { which, offset: i });
            }
        }
        Ok(())
    }
}

/// Offsets where one token ends and the next begins, excluding text start
/// and end. A boundary across whitespace sits at the left token's end.
pub fn boundary_set(seg: &Segmentation) -> BTreeSet<usize> {
    boundaries_of(&seg.spans)
}

fn boundaries_of(spans: &[Span]) -> BTreeSet<usize> {
    spans.windows(2).map(|w| w[0].end).collect()
}

/// One reconciled word and the tokens of each input segmentation it covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Word {
    pub span: Span,
    pub subtoken_ids: Vec<usize>,
    pub ling_ids: Vec<usize>,
}

/// A text split into reconciled words, keeping both source tokenizations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentedText {
    text: String,
    words: Vec<Word>,
    sub_spans: Vec<Span>,
    ling_spans: Vec<Span>,
    /// Byte offset of every character, plus the text length.
    byte_offsets: Vec<usize>,
    subtokens: Vec<String>,
}

impl SegmentedText {
    fn build(text: &str, words: Vec<Word>, sub_spans: Vec<Span>, ling_spans: Vec<Span>) -> Self {
        let byte_offsets: Vec<usize> = text
            .char_indices()
            .map(|(b, _)| b)
            .chain([text.len()])
            .collect();
        let subtokens = sub_spans
            .iter()
            .map(|s| text[byte_offsets[s.start]..byte_offsets[s.end]].to_string())
            .collect();
        Self {
            text: text.to_string(),
            words,
            sub_spans,
            ling_spans,
            byte_offsets,
            subtokens,
        }
    }

    pub fn empty() -> Self {
        Self::build("", Vec::new(), Vec::new(), Vec::new())
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn words(&self) -> &[Word] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word_text(&self, index: usize) -> &str {
        let span = self.words[index].span;
        &self.text[self.byte_offsets[span.start]..self.byte_offsets[span.end]]
    }

    /// Surface strings of the subword tokens, in order.
    pub fn subtokens(&self) -> &[String] {
        &self.subtokens
    }

    pub fn subtoken_count(&self) -> usize {
        self.sub_spans.len()
    }

    pub fn sub_spans(&self) -> &[Span] {
        &self.sub_spans
    }

    pub fn ling_spans(&self) -> &[Span] {
        &self.ling_spans
    }

    /// The words viewed as a segmentation of the same text.
    pub fn as_segmentation(&self) -> Segmentation {
        Segmentation {
            text: self.text.clone(),
            spans: self.words.iter().map(|w| w.span).collect(),
        }
    }
}

/// Intersect the boundary sets of a linguistic and a subword segmentation.
pub fn reconcile(
    text: &str,
    ling: &Segmentation,
    sub: &Segmentation,
) -> Result<SegmentedText, SegmentationError> {
    if ling.text != text || sub.text != text {
        return Err(SegmentationError::InvalidSegmentation {
            index: 0,
            reason: "refers to a different text",
        });
    }
    ling.check_tiling("linguistic")?;
    sub.check_tiling("subword")?;

    let ling_bounds = boundary_set(ling);
    let cut: BTreeSet<usize> = boundary_set(sub)
        .intersection(&ling_bounds)
        .copied()
        .collect();

    let mut words = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for (k, s) in sub.spans.iter().enumerate() {
        current.push(k);
        let last = k + 1 == sub.spans.len();
        if last || cut.contains(&s.end) {
            let span = Span::new(sub.spans[current[0]].start, s.end);
            words.push(Word {
                span,
                subtoken_ids: std::mem::take(&mut current),
                ling_ids: Vec::new(),
            });
        }
    }

    // Every linguistic token lies inside exactly one word since each cut is
    // also a linguistic boundary.
    let mut w = 0;
    for (k, s) in ling.spans.iter().enumerate() {
        while w < words.len() && words[w].span.end < s.end {
            w += 1;
        }
        match words.get_mut(w) {
            Some(word) if word.span.contains(s) => word.ling_ids.push(k),
            _ => {
                return Err(SegmentationError::CoverageMismatch {
                    which: "linguistic",
                    offset: s.start,
                })
            }
        }
    }

    Ok(SegmentedText::build(
        text,
        words,
        sub.spans.clone(),
        ling.spans.clone(),
    ))
}

/// Convenience wrapper taking raw span lists.
pub fn reconcile_spans(
    text: &str,
    ling: Vec<Span>,
    sub: Vec<Span>,
) -> Result<SegmentedText, SegmentationError> {
    let ling = Segmentation::new(text, ling)?;
    let sub = Segmentation::new(text, sub)?;
    reconcile(text, &ling, &sub)
}
