//! Per-word weights, score aggregation and weighter training.
//!
//! The final score of a pair is
//!
//! ```text
//! score = c * sum_i w_x[i] * s_x[i]  +  (1 - c) * sum_j w_y[j] * s_y[j]
//! ```
//!
//! where `w_x` and `w_y` are each normalized to sum to one. The learned
//! weighter projects every token embedding onto a vector `W`, takes a
//! softmax over the tokens of each text separately, and sums token weights
//! into word weights. `c = logistic(theta_c)`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{StepScore, TokenEmbeddings};
use crate::masking::Side;
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Error)]
pub enum WeighterError {
    #[error("both texts of the pair are empty")]
    EmptyPair,
    #[error("candidate text is empty")]
    EmptyCandidate,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid word/token map: {0}")]
    InvalidTokenMap(String),
    #[error("step scores do not match the weighted words: {0}")]
    CoverageMismatch(String),
    #[error("invalid training example: {0}")]
    InvalidExample(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("holdout fraction {fraction} leaves no training or no validation examples out of {n}")]
    DegenerateSplit { n: usize, fraction: f64 },
    #[error("unsupported weighter file version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Learnable weighter for one quality dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct WeighterParams {
    pub w: Vec<f64>,
    pub theta_c: f64,
    pub dimension_label: String,
}

impl WeighterParams {
    pub fn zeros(dim: usize, dimension_label: impl Into<String>) -> Self {
        Self {
            w: vec![0.0; dim],
            theta_c: 0.0,
            dimension_label: dimension_label.into(),
        }
    }

    /// `W` drawn from a standard normal scaled by `1/sqrt(d)`, `c = 0.5`.
    pub fn random(
        dim: usize,
        dimension_label: impl Into<String>,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let w = (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            })
            .collect::<Vec<f64>>();
        Self {
            w,
            theta_c: 0.0,
            dimension_label: dimension_label.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn c(&self) -> f64 {
        logistic(self.theta_c)
    }

    fn flat(&self) -> Vec<f64> {
        let mut p = self.w.clone();
        p.push(self.theta_c);
        p
    }

    fn set_flat(&mut self, p: &[f64]) {
        let d = self.w.len();
        self.w.copy_from_slice(&p[..d]);
        self.theta_c = p[d];
    }
}

/// Row indices (into the embeddings of `x <sep> y`) of each word's tokens.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WordTokenMap {
    pub candidate: Vec<Vec<usize>>,
    pub source: Vec<Vec<usize>>,
}

impl WordTokenMap {
    /// Layout where the candidate's subword tokens occupy rows `0..n`, the
    /// separator row `n`, and the source's tokens the rows after it.
    pub fn for_pair(
        candidate_words: &[Vec<usize>],
        n_candidate_tokens: usize,
        source_words: &[Vec<usize>],
    ) -> Self {
        let offset = n_candidate_tokens + 1;
        Self {
            candidate: candidate_words.to_vec(),
            source: source_words
                .iter()
                .map(|w| w.iter().map(|k| k + offset).collect())
                .collect(),
        }
    }

    pub fn side(&self, side: Side) -> &[Vec<usize>] {
        match side {
            Side::Candidate => &self.candidate,
            Side::Source => &self.source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightAssignment {
    pub w_x: Vec<f64>,
    pub w_y: Vec<f64>,
    pub c: f64,
}

impl WeightAssignment {
    pub fn side(&self, side: Side) -> &[f64] {
        match side {
            Side::Candidate => &self.w_x,
            Side::Source => &self.w_y,
        }
    }

    /// Weight of a step including the candidate factor: `c * w_x[i]` or
    /// `(1 - c) * w_y[j]`. These sum to one over all steps.
    pub fn global_weight(&self, side: Side, index: usize) -> f64 {
        match side {
            Side::Candidate => self.c * self.w_x[index],
            Side::Source => (1.0 - self.c) * self.w_y[index],
        }
    }
}

/// `c` when one side has no words: the other side carries all mass.
fn degenerate_c(n: usize, m: usize, c: f64) -> f64 {
    match (n, m) {
        (_, 0) => 1.0,
        (0, _) => 0.0,
        _ => c,
    }
}

pub fn uniform_weights(n: usize, m: usize) -> Result<WeightAssignment, WeighterError> {
    if n == 0 && m == 0 {
        return Err(WeighterError::EmptyPair);
    }
    Ok(WeightAssignment {
        w_x: vec![1.0 / n as f64; n],
        w_y: vec![1.0 / m as f64; m],
        c: degenerate_c(n, m, 0.5),
    })
}

pub fn candidate_only_weights(n: usize, m: usize) -> Result<WeightAssignment, WeighterError> {
    if n == 0 {
        return Err(WeighterError::EmptyCandidate);
    }
    Ok(WeightAssignment {
        w_x: vec![1.0 / n as f64; n],
        w_y: vec![1.0 / m as f64; m],
        c: 1.0,
    })
}

/// Softmax over one text's tokens, pooled into word weights.
#[derive(Debug)]
struct TextForward {
    rows: Vec<usize>,
    word_of: Vec<usize>,
    v: Vec<f64>,
    words: Vec<f64>,
}

impl TextForward {
    fn new(w: &[f64], emb: &TokenEmbeddings, words: &[Vec<usize>]) -> Self {
        let mut rows = Vec::new();
        let mut word_of = Vec::new();
        for (i, toks) in words.iter().enumerate() {
            rows.extend_from_slice(toks);
            word_of.extend(std::iter::repeat_n(i, toks.len()));
        }
        let logits: Vec<f64> = rows.iter().map(|&k| dot(w, emb.row(k))).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|u| (u - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let v: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let mut pooled = vec![0.0; words.len()];
        for (vk, &i) in v.iter().zip(&word_of) {
            pooled[i] += vk;
        }
        Self {
            rows,
            word_of,
            v,
            words: pooled,
        }
    }

    /// Gradient of `sum_i w_i s_i` with respect to `W`, accumulated into
    /// `out` with factor `scale`. Returns the weighted sum itself.
    fn weighted_sum_grad(
        &self,
        emb: &TokenEmbeddings,
        scores: &[f64],
        scale: f64,
        out: &mut [f64],
    ) -> f64 {
        let sum: f64 = self
            .v
            .iter()
            .zip(&self.word_of)
            .map(|(v, &i)| v * scores[i])
            .sum();
        for ((&k, v), &i) in self.rows.iter().zip(&self.v).zip(&self.word_of) {
            let coef = scale * v * (scores[i] - sum);
            for (o, e) in out.iter_mut().zip(emb.row(k)) {
                *o += coef * e;
            }
        }
        sum
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_map(emb: &TokenEmbeddings, map: &WordTokenMap) -> Result<(), WeighterError> {
    let mut seen = vec![false; emb.len()];
    for (side, words) in [
        (Side::Candidate, &map.candidate),
        (Side::Source, &map.source),
    ] {
        for (i, toks) in words.iter().enumerate() {
            if toks.is_empty() {
                return Err(WeighterError::InvalidTokenMap(format!(
                    "{side} word {i} has no tokens"
                )));
            }
            for &k in toks {
                match seen.get_mut(k) {
                    None => {
                        return Err(WeighterError::InvalidTokenMap(format!(
                            "{side} word {i} refers to row {k} of {}",
                            emb.len()
                        )))
                    }
                    Some(true) => {
                        return Err(WeighterError::InvalidTokenMap(format!(
                            "row {k} used twice"
                        )))
                    }
                    Some(s) => *s = true,
                }
            }
        }
    }
    Ok(())
}

struct Forward {
    x: TextForward,
    y: TextForward,
    c: f64,
}

fn forward(
    params: &WeighterParams,
    emb: &TokenEmbeddings,
    map: &WordTokenMap,
) -> Result<Forward, WeighterError> {
    if emb.dim() != params.dim() {
        return Err(WeighterError::DimensionMismatch {
            expected: params.dim(),
            got: emb.dim(),
        });
    }
    if map.candidate.is_empty() && map.source.is_empty() {
        return Err(WeighterError::EmptyPair);
    }
    check_map(emb, map)?;
    let x = TextForward::new(&params.w, emb, &map.candidate);
    let y = TextForward::new(&params.w, emb, &map.source);
    let c = degenerate_c(map.candidate.len(), map.source.len(), params.c());
    Ok(Forward { x, y, c })
}

pub fn learned_weights(
    params: &WeighterParams,
    emb: &TokenEmbeddings,
    map: &WordTokenMap,
) -> Result<WeightAssignment, WeighterError> {
    let f = forward(params, emb, map)?;
    Ok(WeightAssignment {
        w_x: f.x.words,
        w_y: f.y.words,
        c: f.c,
    })
}

/// Split step scores into per-side vectors, checking each word is scored
/// exactly once.
pub fn scores_by_side(
    scores: &[StepScore],
    n: usize,
    m: usize,
) -> Result<(Vec<f64>, Vec<f64>), WeighterError> {
    let mut x = vec![None; n];
    let mut y = vec![None; m];
    for s in scores {
        let slot = match s.side {
            Side::Candidate => x.get_mut(s.word_index),
            Side::Source => y.get_mut(s.word_index),
        };
        match slot {
            None => {
                return Err(WeighterError::CoverageMismatch(format!(
                    "no {} word {}",
                    s.side, s.word_index
                )))
            }
            Some(Some(_)) => {
                return Err(WeighterError::CoverageMismatch(format!(
                    "{} word {} scored twice",
                    s.side, s.word_index
                )))
            }
            Some(slot) => *slot = Some(f64::from(s.value)),
        }
    }
    let collect = |v: Vec<Option<f64>>, side: Side| {
        v.into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.ok_or_else(|| {
                    WeighterError::CoverageMismatch(format!("{side} word {i} unscored"))
                })
            })
            .collect::<Result<Vec<_>, _>>()
    };
    Ok((collect(x, Side::Candidate)?, collect(y, Side::Source)?))
}

/// `sum w s / sum w`. When all weights are equal this is evaluated as
/// `sum s / len`, which is exact for binary scores.
fn text_score(w: &[f64], s: &[f64]) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    if w.iter().all(|&wi| wi == w[0]) {
        return s.iter().sum::<f64>() / s.len() as f64;
    }
    let num: f64 = w.iter().zip(s).map(|(a, b)| a * b).sum();
    let den: f64 = w.iter().sum();
    num / den
}

fn combine(c: f64, x: f64, y: f64) -> f64 {
    let score = if c == 1.0 {
        x
    } else if c == 0.0 {
        y
    } else {
        c * x + (1.0 - c) * y
    };
    score.clamp(0.0, 1.0)
}

/// Weighted sum of step scores.
pub fn aggregate(scores: &[StepScore], wa: &WeightAssignment) -> Result<f64, WeighterError> {
    let (sx, sy) = scores_by_side(scores, wa.w_x.len(), wa.w_y.len())?;
    Ok(combine(
        wa.c,
        text_score(&wa.w_x, &sx),
        text_score(&wa.w_y, &sy),
    ))
}

/// One supervised example for weighter training. Embeddings are computed
/// once and cached.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub embeddings: TokenEmbeddings,
    pub word_token_map: WordTokenMap,
    pub step_scores: Vec<StepScore>,
    pub human_score: f64,
}

impl TrainingExample {
    pub fn validate(&self) -> Result<(), WeighterError> {
        if !(0.0..=1.0).contains(&self.human_score) {
            return Err(WeighterError::InvalidExample(format!(
                "human score {} outside [0, 1]",
                self.human_score
            )));
        }
        check_map(&self.embeddings, &self.word_token_map)?;
        scores_by_side(
            &self.step_scores,
            self.word_token_map.candidate.len(),
            self.word_token_map.source.len(),
        )?;
        Ok(())
    }
}

pub fn loss(params: &WeighterParams, ex: &TrainingExample) -> Result<f64, WeighterError> {
    let wa = learned_weights(params, &ex.embeddings, &ex.word_token_map)?;
    let score = aggregate(&ex.step_scores, &wa)?;
    Ok((score - ex.human_score).powi(2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w: Vec<f64>,
    pub theta_c: f64,
}

impl Gradient {
    pub fn flat(&self) -> Vec<f64> {
        let mut g = self.w.clone();
        g.push(self.theta_c);
        g
    }
}

/// Analytic gradient of [`loss`] with respect to `(W, theta_c)`.
pub fn grad_loss(params: &WeighterParams, ex: &TrainingExample) -> Result<Gradient, WeighterError> {
    let f = forward(params, &ex.embeddings, &ex.word_token_map)?;
    let (sx, sy) = scores_by_side(&ex.step_scores, f.x.words.len(), f.y.words.len())?;
    let (n, m) = (sx.len(), sy.len());

    let mut dx = vec![0.0; params.dim()];
    let mut dy = vec![0.0; params.dim()];
    let a = f.x.weighted_sum_grad(&ex.embeddings, &sx, 1.0, &mut dx);
    let b = f.y.weighted_sum_grad(&ex.embeddings, &sy, 1.0, &mut dy);
    let score = combine(
        f.c,
        text_score(&f.x.words, &sx),
        text_score(&f.y.words, &sy),
    );
    let outer = 2.0 * (score - ex.human_score);

    let (cx, cy) = match (n, m) {
        (_, 0) => (1.0, 0.0),
        (0, _) => (0.0, 1.0),
        _ => (f.c, 1.0 - f.c),
    };
    let w = dx
        .iter()
        .zip(&dy)
        .map(|(gx, gy)| outer * (cx * gx + cy * gy))
        .collect();
    let theta_c = if n > 0 && m > 0 {
        outer * (a - b) * f.c * (1.0 - f.c)
    } else {
        0.0
    };
    Ok(Gradient { w, theta_c })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            holdout_fraction: 0.2,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedWeighter {
    pub params: WeighterParams,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Epoch 0 is the initial parameters, before any update.
    pub history: Vec<EpochStats>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

impl TrainedWeighter {
    pub fn meta(&self, cfg: &TrainConfig) -> TrainingMeta {
        TrainingMeta {
            seed: cfg.seed,
            epochs: cfg.epochs,
            lr: cfg.adam.lr,
            val_loss: self.best_val_loss,
        }
    }
}

pub fn mean_loss(
    params: &WeighterParams,
    examples: &[&TrainingExample],
) -> Result<f64, WeighterError> {
    let mut total = 0.0;
    for ex in examples {
        total += loss(params, ex)?;
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Per-example Adam over a seeded shuffle of the training split, keeping the
/// parameters with the lowest validation loss seen (initial ones included).
pub fn train_weighter(
    dataset: &[TrainingExample],
    dimension_label: &str,
    cfg: &TrainConfig,
) -> Result<TrainedWeighter, WeighterError> {
    let first = dataset.first().ok_or(WeighterError::EmptyDataset)?;
    let dim = first.embeddings.dim();
    for ex in dataset {
        if ex.embeddings.dim() != dim {
            return Err(WeighterError::DimensionMismatch {
                expected: dim,
                got: ex.embeddings.dim(),
            });
        }
        ex.validate()?;
    }

    let n = dataset.len();
    let n_val = (n as f64 * cfg.holdout_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(WeighterError::DegenerateSplit {
            n,
            fraction: cfg.holdout_fraction,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut val_indices = val_idx.to_vec();
    val_indices.sort_unstable();
    let mut train_order = train_idx.to_vec();
    train_order.sort_unstable();
    let train_indices = train_order.clone();
    let val: Vec<&TrainingExample> = val_indices.iter().map(|&i| &dataset[i]).collect();
    let train: Vec<&TrainingExample> = train_indices.iter().map(|&i| &dataset[i]).collect();

    let mut params = WeighterParams::random(dim, dimension_label, &mut rng);
    let mut flat = params.flat();
    let mut opt = Adam::new(cfg.adam, flat.len());

    let init_val = mean_loss(&params, &val)?;
    let mut history = vec![EpochStats {
        epoch: 0,
        train_loss: mean_loss(&params, &train)?,
        val_loss: init_val,
    }];
    let mut best = (params.clone(), 0, init_val);

    for epoch in 1..=cfg.epochs {
        train_order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for &i in &train_order {
            let ex = &dataset[i];
            train_loss += loss(&params, ex)?;
            let g = grad_loss(&params, ex)?;
            opt.step(&mut flat, &g.flat());
            params.set_flat(&flat);
        }
        let val_loss = mean_loss(&params, &val)?;
        history.push(EpochStats {
            epoch,
            train_loss: train_loss / train_order.len() as f64,
            val_loss,
        });
        if val_loss < best.2 {
            best = (params.clone(), epoch, val_loss);
        }
    }

    Ok(TrainedWeighter {
        params: best.0,
        best_epoch: best.1,
        best_val_loss: best.2,
        history,
        train_indices,
        val_indices,
    })
}

pub const WEIGHTER_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub val_loss: f64,
}

/// On-disk JSON form of [`WeighterParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeighterFile {
    pub version: u32,
    pub dimension_label: String,
    pub d: usize,
    #[serde(rename = "W")]
    pub w: Vec<f64>,
    pub theta_c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_meta: Option<TrainingMeta>,
}

impl WeighterFile {
    pub fn new(params: &WeighterParams, training_meta: Option<TrainingMeta>) -> Self {
        Self {
            version: WEIGHTER_FILE_VERSION,
            dimension_label: params.dimension_label.clone(),
            d: params.dim(),
            w: params.w.clone(),
            theta_c: params.theta_c,
            training_meta,
        }
    }

    pub fn into_params(self) -> Result<WeighterParams, WeighterError> {
        if self.version != WEIGHTER_FILE_VERSION {
            return Err(WeighterError::UnsupportedVersion(self.version));
        }
        if self.w.len() != self.d {
            return Err(WeighterError::DimensionMismatch {
                expected: self.d,
                got: self.w.len(),
            });
        }
        if !self.theta_c.is_finite() || self.w.iter().any(|v| !v.is_finite()) {
            return Err(WeighterError::InvalidExample(
                "non-finite weighter parameter".into(),
            ));
        }
        Ok(WeighterParams {
            w: self.w,
            theta_c: self.theta_c,
            dimension_label: self.dimension_label,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WeighterError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WeighterError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }
}

pub fn load_weighter(path: impl AsRef<Path>) -> Result<WeighterParams, WeighterError> {
    WeighterFile::load(path)?.into_params()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(side: Side, word_index: usize, value: u8) -> StepScore {
        StepScore {
            side,
            word_index,
            value,
        }
    }

    fn scores(sx: &[u8], sy: &[u8]) -> Vec<StepScore> {
        let x = sx
            .iter()
            .enumerate()
            .map(|(i, &v)| step(Side::Candidate, i, v));
        let y = sy
            .iter()
            .enumerate()
            .map(|(j, &v)| step(Side::Source, j, v));
        x.chain(y).collect()
    }

    fn single_token_map(n: usize, m: usize) -> WordTokenMap {
        let cand: Vec<Vec<usize>> = (0..n).map(|k| vec![k]).collect();
        let src: Vec<Vec<usize>> = (0..m).map(|k| vec![k]).collect();
        WordTokenMap::for_pair(&cand, n, &src)
    }

    fn emb(rows: usize, dim: usize) -> TokenEmbeddings {
        let data = (0..rows * dim)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0)
            .collect();
        TokenEmbeddings::from_flat(dim, data).unwrap()
    }

    #[test]
    fn uniform_examples() {
        let wa = uniform_weights(4, 2).unwrap();
        assert_eq!(wa.w_x, vec![0.25; 4]);
        assert_eq!(wa.w_y, vec![0.5; 2]);
        assert_eq!(wa.c, 0.5);
        let wa = uniform_weights(1, 1).unwrap();
        assert_eq!((wa.w_x, wa.w_y, wa.c), (vec![1.0], vec![1.0], 0.5));
        let wa = uniform_weights(3, 0).unwrap();
        assert_eq!((wa.w_x, wa.w_y.len(), wa.c), (vec![1.0 / 3.0; 3], 0, 1.0));
        assert!(matches!(
            uniform_weights(0, 0),
            Err(WeighterError::EmptyPair)
        ));
    }

    #[test]
    fn candidate_only_examples() {
        let wa = candidate_only_weights(2, 3).unwrap();
        assert_eq!((wa.c, wa.w_x.clone()), (1.0, vec![0.5, 0.5]));
        let s1 = aggregate(&scores(&[1, 0], &[1, 1, 1]), &wa).unwrap();
        let wa2 = WeightAssignment {
            w_y: vec![0.9, 0.05, 0.05],
            ..wa.clone()
        };
        assert_eq!(s1, aggregate(&scores(&[1, 0], &[0, 0, 1]), &wa2).unwrap());
        let wa = candidate_only_weights(1, 4).unwrap();
        assert_eq!(aggregate(&scores(&[1], &[0, 0, 0, 0]), &wa).unwrap(), 1.0);
        assert!(matches!(
            candidate_only_weights(0, 2),
            Err(WeighterError::EmptyCandidate)
        ));
    }

    #[test]
    fn aggregate_examples() {
        let wa = uniform_weights(3, 2).unwrap();
        let s = aggregate(&scores(&[1, 0, 1], &[0, 1]), &wa).unwrap();
        assert!((s - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(aggregate(&scores(&[1, 1, 1], &[1, 1]), &wa).unwrap(), 1.0);
        assert_eq!(aggregate(&scores(&[0, 0, 0], &[0, 0]), &wa).unwrap(), 0.0);
        let skewed = WeightAssignment {
            w_x: vec![0.7, 0.2, 0.1],
            w_y: vec![0.35, 0.65],
            c: 0.3,
        };
        assert_eq!(
            aggregate(&scores(&[1, 1, 1], &[1, 1]), &skewed).unwrap(),
            1.0
        );
    }

    #[test]
    fn aggregate_coverage_errors() {
        let wa = uniform_weights(2, 1).unwrap();
        assert!(matches!(
            aggregate(&scores(&[1], &[1]), &wa),
            Err(WeighterError::CoverageMismatch(_))
        ));
        let mut dup = scores(&[1, 1], &[1]);
        dup.push(step(Side::Candidate, 0, 1));
        assert!(matches!(
            aggregate(&dup, &wa),
            Err(WeighterError::CoverageMismatch(_))
        ));
        assert!(matches!(
            aggregate(&scores(&[1, 1], &[1, 0]), &wa),
            Err(WeighterError::CoverageMismatch(_))
        ));
    }

    #[test]
    fn zero_w_gives_token_share() {
        // candidate: word0 = 2 tokens, word1 = 1 token; source: one 3-token word
        let map = WordTokenMap {
            candidate: vec![vec![0, 1], vec![2]],
            source: vec![vec![4, 5, 6]],
        };
        let params = WeighterParams::zeros(4, "t");
        let wa = learned_weights(&params, &emb(7, 4), &map).unwrap();
        assert!((wa.w_x[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((wa.w_x[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wa.w_y, vec![1.0]);
        assert_eq!(wa.c, 0.5);
    }

    #[test]
    fn single_word_text_gets_full_weight() {
        let map = WordTokenMap {
            candidate: vec![vec![0, 1, 2]],
            source: vec![vec![4], vec![5]],
        };
        let params = WeighterParams {
            w: vec![3.0, -1.0, 0.5, 2.0],
            theta_c: 1.0,
            dimension_label: "t".into(),
        };
        let wa = learned_weights(&params, &emb(6, 4), &map).unwrap();
        assert!((wa.w_x[0] - 1.0).abs() < 1e-15);
        assert!((wa.w_y.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((wa.c - logistic(1.0)).abs() < 1e-15);
    }

    #[test]
    fn uniform_equivalence_is_exact() {
        for (n, m) in [(1, 1), (3, 2), (7, 10), (13, 29)] {
            let params = WeighterParams::zeros(5, "t");
            let wa = learned_weights(&params, &emb(n + m + 1, 5), &single_token_map(n, m)).unwrap();
            assert_eq!(wa, uniform_weights(n, m).unwrap());
        }
    }

    #[test]
    fn learned_errors() {
        let params = WeighterParams::zeros(3, "t");
        assert!(matches!(
            learned_weights(&params, &emb(3, 4), &single_token_map(1, 1)),
            Err(WeighterError::DimensionMismatch {
                expected: 3,
                got: 4
            })
        ));
        let bad = WordTokenMap {
            candidate: vec![vec![0], vec![9]],
            source: vec![],
        };
        assert!(matches!(
            learned_weights(&params, &emb(3, 3), &bad),
            Err(WeighterError::InvalidTokenMap(_))
        ));
        let dup = WordTokenMap {
            candidate: vec![vec![0], vec![0]],
            source: vec![],
        };
        assert!(matches!(
            learned_weights(&params, &emb(3, 3), &dup),
            Err(WeighterError::InvalidTokenMap(_))
        ));
    }

    #[test]
    fn loss_examples() {
        let params = WeighterParams::zeros(2, "t");
        let ex = TrainingExample {
            embeddings: emb(6, 2),
            word_token_map: single_token_map(3, 2),
            step_scores: scores(&[1, 0, 1], &[0, 1]),
            human_score: 0.5,
        };
        assert!((loss(&params, &ex).unwrap() - 1.0 / 144.0).abs() < 1e-15);
        let perfect = TrainingExample {
            human_score: 7.0 / 12.0,
            ..ex.clone()
        };
        assert!(loss(&params, &perfect).unwrap() < 1e-30);
        let far = TrainingExample {
            step_scores: scores(&[1, 1, 1], &[1, 1]),
            human_score: 0.0,
            ..ex
        };
        assert_eq!(loss(&params, &far).unwrap(), 1.0);
    }

    #[test]
    fn gradient_zero_at_minimum_and_for_balanced_theta() {
        let params = WeighterParams {
            w: vec![0.3, -0.2],
            theta_c: 0.4,
            dimension_label: "t".into(),
        };
        let mut ex = TrainingExample {
            embeddings: emb(6, 2),
            word_token_map: single_token_map(3, 2),
            step_scores: scores(&[1, 0, 1], &[0, 1]),
            human_score: 0.0,
        };
        let wa = learned_weights(&params, &ex.embeddings, &ex.word_token_map).unwrap();
        ex.human_score = aggregate(&ex.step_scores, &wa).unwrap();
        let g = grad_loss(&params, &ex).unwrap();
        assert!(g.flat().iter().all(|v| v.abs() < 1e-15), "{g:?}");

        // W = 0 with equal per-text means: the theta_c factor vanishes.
        let zero = WeighterParams::zeros(2, "t");
        let ex = TrainingExample {
            embeddings: emb(7, 2),
            word_token_map: single_token_map(2, 4),
            step_scores: scores(&[1, 0], &[1, 0, 0, 1]),
            human_score: 0.9,
        };
        assert_eq!(grad_loss(&zero, &ex).unwrap().theta_c, 0.0);
    }

    #[test]
    fn training_rejects_bad_datasets() {
        assert!(matches!(
            train_weighter(&[], "t", &TrainConfig::default()),
            Err(WeighterError::EmptyDataset)
        ));
        let ex = TrainingExample {
            embeddings: emb(3, 2),
            word_token_map: single_token_map(1, 1),
            step_scores: scores(&[1], &[0]),
            human_score: 0.5,
        };
        let two = vec![ex.clone(), ex.clone()];
        assert!(matches!(
            train_weighter(&two, "t", &TrainConfig::default()),
            Err(WeighterError::DegenerateSplit { n: 2, .. })
        ));
        let bad = vec![TrainingExample {
            human_score: 1.5,
            ..ex
        }];
        assert!(matches!(
            train_weighter(&bad, "t", &TrainConfig::default()),
            Err(WeighterError::InvalidExample(_))
        ));
    }

    #[test]
    fn weighter_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let params = WeighterParams {
            w: vec![0.1, -2.5, 3.0],
            theta_c: -0.25,
            dimension_label: "fluency".into(),
        };
        let meta = TrainingMeta {
            seed: 7,
            epochs: 100,
            lr: 1e-5,
            val_loss: 0.01,
        };
        WeighterFile::new(&params, Some(meta)).save(&path).unwrap();
        let raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(raw["version"], 1);
        assert_eq!(raw["d"], 3);
        assert_eq!(raw["W"][1], -2.5);
        assert_eq!(raw["training_meta"]["seed"], 7);
        assert_eq!(load_weighter(&path).unwrap(), params);

        let mut file = WeighterFile::new(&params, None);
        file.version = 2;
        assert!(matches!(
            file.into_params(),
            Err(WeighterError::UnsupportedVersion(2))
        ));
    }
}
