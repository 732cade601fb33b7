//! End-to-end scoring of candidate/source pairs.
//!
//! [`score_pair`] masks every word, asks the backend for predictions,
//! scores them by exact match and aggregates with the chosen weights.
//! [`selective_score`] computes learned weights first and only runs the
//! predictions whose weights make up a given share of the total.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    self, exact_match, Backend, BackendError, RetryPolicy, StepScore, TokenEmbeddings,
};
use crate::masking::{
    build_masked_sequence, build_masked_sequences, MaskedSequence, MaskingError, PairSegmentation,
    Side, WindowConfig,
};
use crate::stats::pearson;
use crate::weighter::{
    aggregate, candidate_only_weights, learned_weights, uniform_weights, TrainingExample,
    WeightAssignment, WeighterError, WeighterParams, WordTokenMap,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Masking(#[from] MaskingError),
    #[error(transparent)]
    Weighter(#[from] WeighterError),
    #[error("pair {pair_id} failed: {}", failures.last().map(|f| f.error.to_string()).unwrap_or_default())]
    PairFailed {
        pair_id: String,
        failures: Vec<StepFailure>,
    },
    #[error("threshold {0} must lie in (0, 1]")]
    InvalidThreshold(f64),
    #[error("insufficient data for {dimension}: {reason}")]
    InsufficientData { dimension: String, reason: String },
    #[error("alignment mismatch: {0}")]
    AlignmentMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightingScheme<'a> {
    Uniform,
    CandidateOnly,
    Learned(&'a WeighterParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub window: WindowConfig,
    pub retry: RetryPolicy,
    /// Upper bound on concurrent backend calls for one pair.
    pub max_inflight: usize,
    /// Divide selective scores by the retained weight mass.
    pub renormalize_selective: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            retry: RetryPolicy::default(),
            max_inflight: 4,
            renormalize_selective: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StepRef {
    pub side: Side,
    pub word_index: usize,
}

/// A failed backend call. Calls that later succeeded on retry are kept in
/// [`ScoreReport::failures`] as well.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFailure {
    /// `None` for the embedding call.
    pub step: Option<StepRef>,
    pub attempt: u32,
    pub error: BackendError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub pair_id: String,
    pub final_score: f64,
    pub step_scores: Vec<StepScore>,
    pub weights: WeightAssignment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retained_steps: Option<Vec<StepRef>>,
    pub failures: Vec<StepFailure>,
}

/// A step's weight including the candidate factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalWeight {
    pub side: Side,
    pub word_index: usize,
    pub value: f64,
}

impl GlobalWeight {
    pub fn step(&self) -> StepRef {
        StepRef {
            side: self.side,
            word_index: self.word_index,
        }
    }
}

pub fn global_weights(wa: &WeightAssignment) -> Vec<GlobalWeight> {
    let x = (0..wa.w_x.len()).map(|i| (Side::Candidate, i));
    let y = (0..wa.w_y.len()).map(|j| (Side::Source, j));
    x.chain(y)
        .map(|(side, word_index)| GlobalWeight {
            side,
            word_index,
            value: wa.global_weight(side, word_index),
        })
        .collect()
}

/// Global weights sorted by value descending; ties go to the candidate
/// side first, then to the lower word index.
pub fn rank_steps(wa: &WeightAssignment) -> Vec<GlobalWeight> {
    let mut gw = global_weights(wa);
    gw.sort_by(|a, b| {
        b.value
            .total_cmp(&a.value)
            .then(a.side.cmp(&b.side))
            .then(a.word_index.cmp(&b.word_index))
    });
    gw
}

/// The shortest prefix of `ranked` whose cumulative weight reaches
/// `threshold`. A threshold of 1 or more keeps every step; 0 or less keeps
/// none.
pub fn select_steps(ranked: &[GlobalWeight], threshold: f64) -> &[GlobalWeight] {
    if threshold >= 1.0 {
        return ranked;
    }
    if threshold <= 0.0 {
        return &ranked[..0];
    }
    let mut cum = 0.0;
    for (k, g) in ranked.iter().enumerate() {
        cum += g.value;
        if cum >= threshold {
            return &ranked[..=k];
        }
    }
    ranked
}

/// Rows of the `x <sep> y` embedding matrix belonging to each word.
pub fn word_token_map(pair: &PairSegmentation) -> WordTokenMap {
    let ids = |t: &crate::segmentation::SegmentedText| {
        t.words()
            .iter()
            .map(|w| w.subtoken_ids.clone())
            .collect::<Vec<_>>()
    };
    WordTokenMap::for_pair(
        &ids(&pair.candidate),
        pair.candidate.subtoken_count(),
        &ids(&pair.source),
    )
}

fn embed_pair(
    pair_id: &str,
    pair: &PairSegmentation,
    backend: &dyn Backend,
    cfg: &ScoringConfig,
    failures: &mut Vec<StepFailure>,
) -> Result<TokenEmbeddings, PipelineError> {
    let cand = pair.candidate.subtokens();
    let src = pair.source.subtokens();
    let sep = &cfg.window.separator_sentinel;
    cfg.retry
        .run(
            || backends::embed(backend, cand, src, sep),
            |attempt, e| {
                failures.push(StepFailure {
                    step: None,
                    attempt,
                    error: e.clone(),
                })
            },
        )
        .map_err(|_| PipelineError::PairFailed {
            pair_id: pair_id.to_string(),
            failures: failures.clone(),
        })
}

/// Predict and score each sequence with at most `cfg.max_inflight` calls
/// in flight. Results come back in input order. The first step that
/// fails for good stops any further calls for the pair.
fn run_predictions(
    pair_id: &str,
    seqs: &[MaskedSequence],
    backend: &dyn Backend,
    cfg: &ScoringConfig,
    failures: &mut Vec<StepFailure>,
) -> Result<Vec<StepScore>, PipelineError> {
    let predict_one = |seq: &MaskedSequence, log: &mut Vec<(usize, StepFailure)>, idx: usize| {
        let step = StepRef {
            side: seq.side,
            word_index: seq.word_index,
        };
        cfg.retry
            .run(
                || backend.predict(seq),
                |attempt, e| {
                    log.push((
                        idx,
                        StepFailure {
                            step: Some(step),
                            attempt,
                            error: e.clone(),
                        },
                    ))
                },
            )
            .map(|p| StepScore {
                side: seq.side,
                word_index: seq.word_index,
                value: exact_match(&seq.truth, p.word()),
            })
    };

    let workers = cfg.max_inflight.clamp(1, seqs.len().max(1));
    let mut results: Vec<Option<Result<StepScore, BackendError>>> = vec![None; seqs.len()];
    let mut log = Vec::new();
    if workers == 1 {
        for (i, seq) in seqs.iter().enumerate() {
            let r = predict_one(seq, &mut log, i);
            let failed = r.is_err();
            results[i] = Some(r);
            if failed {
                break;
            }
        }
    } else {
        let next = AtomicUsize::new(0);
        let failed = AtomicBool::new(false);
        let shared = Mutex::new((&mut results, &mut log));
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    if failed.load(Ordering::Relaxed) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(seq) = seqs.get(i) else { break };
                    let mut local = Vec::new();
                    let r = predict_one(seq, &mut local, i);
                    if r.is_err() {
                        failed.store(true, Ordering::Relaxed);
                    }
                    let mut guard = shared.lock().expect("result lock poisoned");
                    guard.0[i] = Some(r);
                    guard.1.extend(local);
                });
            }
        });
    }
    log.sort_by_key(|(i, f)| (*i, f.attempt));
    failures.extend(log.into_iter().map(|(_, f)| f));

    let mut scores = Vec::with_capacity(seqs.len());
    for r in results {
        match r {
            Some(Ok(s)) => scores.push(s),
            // A step failed; the rest were skipped.
            _ => {
                return Err(PipelineError::PairFailed {
                    pair_id: pair_id.to_string(),
                    failures: failures.clone(),
                })
            }
        }
    }
    Ok(scores)
}

/// Score every word of the pair and aggregate.
pub fn score_pair(
    pair_id: &str,
    pair: &PairSegmentation,
    backend: &dyn Backend,
    scheme: WeightingScheme<'_>,
    cfg: &ScoringConfig,
) -> Result<ScoreReport, PipelineError> {
    let (n, m) = (pair.candidate.len(), pair.source.len());
    let seqs = build_masked_sequences(pair, &cfg.window)?;
    let mut failures = Vec::new();
    let weights = match scheme {
        WeightingScheme::Uniform => uniform_weights(n, m)?,
        WeightingScheme::CandidateOnly => candidate_only_weights(n, m)?,
        WeightingScheme::Learned(params) => {
            let emb = embed_pair(pair_id, pair, backend, cfg, &mut failures)?;
            learned_weights(params, &emb, &word_token_map(pair))?
        }
    };
    let step_scores = run_predictions(pair_id, &seqs, backend, cfg, &mut failures)?;
    let final_score = aggregate(&step_scores, &weights)?;
    Ok(ScoreReport {
        pair_id: pair_id.to_string(),
        final_score,
        step_scores,
        weights,
        retained_steps: None,
        failures,
    })
}

/// Score using only the highest-weighted steps whose global weights sum to
/// at least `threshold`. Predictions are requested for those steps only.
pub fn selective_score(
    pair_id: &str,
    pair: &PairSegmentation,
    backend: &dyn Backend,
    params: &WeighterParams,
    threshold: f64,
    cfg: &ScoringConfig,
) -> Result<ScoreReport, PipelineError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(PipelineError::InvalidThreshold(threshold));
    }
    cfg.window.validate()?;
    if pair.step_count() == 0 {
        return Err(MaskingError::EmptyPair.into());
    }
    let mut failures = Vec::new();
    let emb = embed_pair(pair_id, pair, backend, cfg, &mut failures)?;
    let weights = learned_weights(params, &emb, &word_token_map(pair))?;
    let ranked = rank_steps(&weights);
    let retained = select_steps(&ranked, threshold);

    let mut in_step_order: Vec<StepRef> = retained.iter().map(GlobalWeight::step).collect();
    in_step_order.sort();
    let seqs = in_step_order
        .iter()
        .map(|s| build_masked_sequence(pair, s.side, s.word_index, &cfg.window))
        .collect::<Result<Vec<_>, _>>()?;
    let step_scores = run_predictions(pair_id, &seqs, backend, cfg, &mut failures)?;

    let final_score = retained_score(
        &step_scores,
        &weights,
        retained,
        retained.len() == ranked.len(),
        cfg.renormalize_selective,
    )?;
    Ok(ScoreReport {
        pair_id: pair_id.to_string(),
        final_score,
        step_scores,
        weights,
        retained_steps: Some(retained.iter().map(GlobalWeight::step).collect()),
        failures,
    })
}

fn retained_score(
    step_scores: &[StepScore],
    weights: &WeightAssignment,
    retained: &[GlobalWeight],
    all: bool,
    renormalize: bool,
) -> Result<f64, PipelineError> {
    if all {
        // Every step kept: the renormalized score is the full weighted score.
        return Ok(aggregate(step_scores, weights)?);
    }
    let mass: f64 = retained.iter().map(|g| g.value).sum();
    let hit: f64 = step_scores
        .iter()
        .map(|s| f64::from(s.value) * weights.global_weight(s.side, s.word_index))
        .sum();
    let score = if renormalize { hit / mass } else { hit };
    Ok(score.clamp(0.0, 1.0))
}

/// What [`selective_score`] would return, computed from a full
/// learned-weights report instead of new backend calls.
pub fn restrict_report(
    report: &ScoreReport,
    threshold: f64,
    renormalize: bool,
) -> Result<ScoreReport, PipelineError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(PipelineError::InvalidThreshold(threshold));
    }
    let ranked = rank_steps(&report.weights);
    let retained = select_steps(&ranked, threshold);
    let kept: BTreeSet<StepRef> = retained.iter().map(GlobalWeight::step).collect();
    let step_scores: Vec<StepScore> = report
        .step_scores
        .iter()
        .filter(|s| {
            kept.contains(&StepRef {
                side: s.side,
                word_index: s.word_index,
            })
        })
        .copied()
        .collect();
    if step_scores.len() != kept.len() {
        return Err(PipelineError::AlignmentMismatch(format!(
            "pair {}: report is missing scores for retained steps",
            report.pair_id
        )));
    }
    let final_score = retained_score(
        &step_scores,
        &report.weights,
        retained,
        retained.len() == ranked.len(),
        renormalize,
    )?;
    Ok(ScoreReport {
        pair_id: report.pair_id.clone(),
        final_score,
        step_scores,
        weights: report.weights.clone(),
        retained_steps: Some(retained.iter().map(GlobalWeight::step).collect()),
        failures: report
            .failures
            .iter()
            .filter(|f| f.step.is_none_or(|s| kept.contains(&s)))
            .cloned()
            .collect(),
    })
}

/// Per-word part-of-speech tags for both texts of a pair.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PosTags {
    pub candidate: Vec<String>,
    pub source: Vec<String>,
}

/// A segmented pair ready for scoring, with human scores already mapped to
/// [0, 1].
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub pair_id: String,
    pub pair: PairSegmentation,
    pub human_scores: BTreeMap<String, f64>,
    pub pos_tags: Option<PosTags>,
}

/// Run every prediction and the embedding for a pair and package them with
/// its human score for `dimension`.
pub fn build_training_example(
    item: &PreparedPair,
    backend: &dyn Backend,
    dimension: &str,
    cfg: &ScoringConfig,
) -> Result<TrainingExample, PipelineError> {
    let human_score =
        *item
            .human_scores
            .get(dimension)
            .ok_or_else(|| PipelineError::InsufficientData {
                dimension: dimension.to_string(),
                reason: format!("pair {} has no human score", item.pair_id),
            })?;
    let mut failures = Vec::new();
    let seqs = build_masked_sequences(&item.pair, &cfg.window)?;
    let embeddings = embed_pair(&item.pair_id, &item.pair, backend, cfg, &mut failures)?;
    let step_scores = run_predictions(&item.pair_id, &seqs, backend, cfg, &mut failures)?;
    Ok(TrainingExample {
        embeddings,
        word_token_map: word_token_map(&item.pair),
        step_scores,
        human_score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub dimension_label: String,
    pub pearson_r: f64,
    pub n_pairs: usize,
    /// Pairs left out because the backend failed on them.
    pub n_failed: usize,
}

/// Pearson correlation between metric and human scores over `(metric,
/// human)` pairs.
pub fn correlate(
    dimension: &str,
    scored: &[(f64, f64)],
    n_failed: usize,
) -> Result<CorrelationReport, PipelineError> {
    let insufficient = |reason: String| PipelineError::InsufficientData {
        dimension: dimension.to_string(),
        reason,
    };
    if scored.len() < 2 {
        return Err(insufficient(format!(
            "{} scored pairs, need at least 2",
            scored.len()
        )));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = scored.iter().copied().unzip();
    let r = pearson(&xs, &ys).ok_or_else(|| insufficient("zero variance".into()))?;
    Ok(CorrelationReport {
        dimension_label: dimension.to_string(),
        pearson_r: r,
        n_pairs: scored.len(),
        n_failed,
    })
}

/// Score every pair that has a human score for `dimension` with `score_fn`
/// and correlate. Failed pairs are skipped and counted; other errors abort.
pub fn evaluate_with<F>(
    items: &[PreparedPair],
    dimension: &str,
    mut score_fn: F,
) -> Result<CorrelationReport, PipelineError>
where
    F: FnMut(&PreparedPair) -> Result<ScoreReport, PipelineError>,
{
    let mut scored = Vec::new();
    let mut failed = 0;
    for item in items {
        let Some(&human) = item.human_scores.get(dimension) else {
            continue;
        };
        match score_fn(item) {
            Ok(report) => scored.push((report.final_score, human)),
            Err(PipelineError::PairFailed { .. }) => failed += 1,
            Err(e) => return Err(e),
        }
    }
    correlate(dimension, &scored, failed)
}

pub fn evaluate_correlation(
    items: &[PreparedPair],
    backend: &dyn Backend,
    scheme: WeightingScheme<'_>,
    dimension: &str,
    cfg: &ScoringConfig,
) -> Result<CorrelationReport, PipelineError> {
    evaluate_with(items, dimension, |item| {
        score_pair(&item.pair_id, &item.pair, backend, scheme, cfg)
    })
}

/// Mean summed global weight per part-of-speech tag, per side.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PosDistribution {
    pub candidate: BTreeMap<String, f64>,
    pub source: BTreeMap<String, f64>,
    pub n_pairs: usize,
}

pub fn pos_weight_distribution(
    reports: &[ScoreReport],
    tags: &[PosTags],
) -> Result<PosDistribution, PipelineError> {
    if reports.len() != tags.len() {
        return Err(PipelineError::AlignmentMismatch(format!(
            "{} reports but {} tag sets",
            reports.len(),
            tags.len()
        )));
    }
    let mut dist = PosDistribution {
        n_pairs: reports.len(),
        ..PosDistribution::default()
    };
    for (report, tags) in reports.iter().zip(tags) {
        for (side, tags, out) in [
            (Side::Candidate, &tags.candidate, &mut dist.candidate),
            (Side::Source, &tags.source, &mut dist.source),
        ] {
            let n = report.weights.side(side).len();
            if tags.len() != n {
                return Err(PipelineError::AlignmentMismatch(format!(
                    "pair {}: {} {side} tags for {n} words",
                    report.pair_id,
                    tags.len()
                )));
            }
            for (i, tag) in tags.iter().enumerate() {
                *out.entry(tag.clone()).or_insert(0.0) += report.weights.global_weight(side, i);
            }
        }
    }
    let n = reports.len().max(1) as f64;
    dist.candidate
        .values_mut()
        .chain(dist.source.values_mut())
        .for_each(|v| *v /= n);
    Ok(dist)
}
