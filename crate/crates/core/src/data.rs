//! JSONL dataset ingestion.
//!
//! The first line is a header object carrying `"schema": 1` and optionally
//! the default human score scale. Every following non-blank line is one
//! [`EvalRecord`]. Spans are `[start, end)` character offsets written as
//! two-element arrays:
//!
//! ```text
//! {"schema":1,"human_scale":{"min":1.0,"max":5.0}}
//! {"pair_id":"p0","candidate_text":"Mr. Smith","source_text":"...",
//!  "candidate_ling_spans":[[0,3],[4,9]],"candidate_sub_spans":[[0,2],[2,3],[4,9]],
//!  "source_ling_spans":[...],"source_sub_spans":[...],
//!  "human_scores":{"fluency":4.33},"pos_tags":{"candidate":["PROPN","PROPN"],"source":[...]}}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::PairSegmentation;
use crate::pipeline::{PosTags, PreparedPair};
use crate::segmentation::{reconcile_spans, SegmentedText, Span};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {reason}")]
    Validation { line: usize, reason: String },
    #[error("score {raw} outside scale [{min}, {max}]")]
    OutOfRange { raw: f64, min: f64, max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumanScale {
    pub min: f64,
    pub max: f64,
}

impl HumanScale {
    pub const UNIT: HumanScale = HumanScale { min: 0.0, max: 1.0 };
}

/// Map a raw human judgment linearly onto [0, 1].
pub fn scale_human_score(raw: f64, scale: HumanScale) -> Result<f64, DataError> {
    let out_of_range = DataError::OutOfRange {
        raw,
        min: scale.min,
        max: scale.max,
    };
    if scale.min.partial_cmp(&scale.max) != Some(std::cmp::Ordering::Less)
        || !(scale.min..=scale.max).contains(&raw)
    {
        return Err(out_of_range);
    }
    Ok((raw - scale.min) / (scale.max - scale.min))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_scale: Option<HumanScale>,
}

impl Default for DatasetHeader {
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            human_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub pair_id: String,
    pub candidate_text: String,
    pub source_text: String,
    pub candidate_ling_spans: Vec<Span>,
    pub candidate_sub_spans: Vec<Span>,
    pub source_ling_spans: Vec<Span>,
    pub source_sub_spans: Vec<Span>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub human_scores: BTreeMap<String, f64>,
    /// Overrides the header's scale for this record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_scale: Option<HumanScale>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_tags: Option<PosTags>,
}

impl EvalRecord {
    /// A record carrying an already segmented pair, without human scores.
    pub fn from_pair(pair_id: impl Into<String>, pair: &PairSegmentation) -> Self {
        Self {
            pair_id: pair_id.into(),
            candidate_text: pair.candidate.text().to_string(),
            source_text: pair.source.text().to_string(),
            candidate_ling_spans: pair.candidate.ling_spans().to_vec(),
            candidate_sub_spans: pair.candidate.sub_spans().to_vec(),
            source_ling_spans: pair.source.ling_spans().to_vec(),
            source_sub_spans: pair.source.sub_spans().to_vec(),
            human_scores: BTreeMap::new(),
            human_scale: None,
            pos_tags: None,
        }
    }

    pub fn segment(&self) -> Result<PairSegmentation, String> {
        let side = |name: &str,
                    text: &str,
                    ling: &[Span],
                    sub: &[Span]|
         -> Result<SegmentedText, String> {
            reconcile_spans(text, ling.to_vec(), sub.to_vec()).map_err(|e| format!("{name}: {e}"))
        };
        Ok(PairSegmentation::new(
            side(
                "candidate",
                &self.candidate_text,
                &self.candidate_ling_spans,
                &self.candidate_sub_spans,
            )?,
            side(
                "source",
                &self.source_text,
                &self.source_ling_spans,
                &self.source_sub_spans,
            )?,
        ))
    }

    fn scaled_scores(
        &self,
        default_scale: Option<HumanScale>,
    ) -> Result<BTreeMap<String, f64>, String> {
        if self.human_scores.is_empty() {
            return Ok(BTreeMap::new());
        }
        let scale = self
            .human_scale
            .or(default_scale)
            .ok_or("human scores present but no scale declared in the record or header")?;
        self.human_scores
            .iter()
            .map(|(dim, &raw)| {
                scale_human_score(raw, scale)
                    .map(|s| (dim.clone(), s))
                    .map_err(|e| format!("{dim}: {e}"))
            })
            .collect()
    }

    /// Segment both texts, scale the human scores, and check tag alignment.
    pub fn prepare(&self, header: &DatasetHeader) -> Result<PreparedPair, String> {
        if self.pair_id.is_empty() {
            return Err("empty pair_id".into());
        }
        let pair = self.segment()?;
        if pair.step_count() == 0 {
            return Err("both texts have no words".into());
        }
        let human_scores = self.scaled_scores(header.human_scale)?;
        if let Some(tags) = &self.pos_tags {
            for (name, n_tags, n_words) in [
                ("candidate", tags.candidate.len(), pair.candidate.len()),
                ("source", tags.source.len(), pair.source.len()),
            ] {
                if n_tags != n_words {
                    return Err(format!("{n_tags} {name} POS tags for {n_words} words"));
                }
            }
        }
        Ok(PreparedPair {
            pair_id: self.pair_id.clone(),
            pair,
            human_scores,
            pos_tags: self.pos_tags.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    /// `None` only for an empty file.
    pub header: Option<DatasetHeader>,
    pub records: Vec<EvalRecord>,
}

impl Dataset {
    pub fn header_or_default(&self) -> DatasetHeader {
        self.header.clone().unwrap_or_default()
    }

    /// Prepared pairs in file order. Cannot fail on a dataset returned by
    /// [`read_dataset`].
    pub fn prepare(&self) -> Result<Vec<PreparedPair>, DataError> {
        let header = self.header_or_default();
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.prepare(&header).map_err(|reason| DataError::Validation {
                    line: i + 2,
                    reason,
                })
            })
            .collect()
    }
}

/// Parse and fully validate a dataset. Errors carry 1-based line numbers.
pub fn read_dataset(reader: impl BufRead) -> Result<Dataset, DataError> {
    let mut dataset = Dataset::default();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        };
        let Some(header) = &dataset.header else {
            let header: DatasetHeader = serde_json::from_str(&line).map_err(parse_err)?;
            if header.schema != SCHEMA_VERSION {
                return Err(DataError::Validation {
                    line: line_no,
                    reason: format!(
                        "unsupported schema {}, expected {SCHEMA_VERSION}",
                        header.schema
                    ),
                });
            }
            dataset.header = Some(header);
            continue;
        };
        let record: EvalRecord = serde_json::from_str(&line).map_err(parse_err)?;
        record
            .prepare(header)
            .map_err(|reason| DataError::Validation {
                line: line_no,
                reason,
            })?;
        if !seen.insert(record.pair_id.clone()) {
            return Err(DataError::Validation {
                line: line_no,
                reason: format!("duplicate pair_id {}", record.pair_id),
            });
        }
        dataset.records.push(record);
    }
    Ok(dataset)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn write_dataset(writer: impl Write, dataset: &Dataset) -> Result<(), DataError> {
    let mut w = BufWriter::new(writer);
    let header = dataset.header_or_default();
    serde_json::to_writer(&mut w, &header).map_err(io::Error::from)?;
    writeln!(w)?;
    for r in &dataset.records {
        serde_json::to_writer(&mut w, r).map_err(io::Error::from)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<(), DataError> {
    write_dataset(File::create(path)?, dataset)
}

/// Whitespace tokenization as spans, used for both tokenizations when no
/// better segmentation is available.
pub fn whitespace_spans(text: &str) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start = None;
    let mut count = 0;
    for (i, c) in text.chars().enumerate() {
        count = i + 1;
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                spans.push(Span::new(s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push(Span::new(s, count));
    }
    spans
}
