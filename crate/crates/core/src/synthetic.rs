//! Seeded synthetic data: random segmentation pairs, random texts, and
//! datasets whose human scores come from a hidden ("planted") weighter.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backends::MockBackend;
use crate::data::{Dataset, DatasetHeader, EvalRecord, HumanScale};
use crate::masking::PairSegmentation;
use crate::pipeline::{score_pair, PosTags, PreparedPair, ScoringConfig, WeightingScheme};
use crate::segmentation::{reconcile_spans, SegmentedText, Span};
use crate::weighter::WeighterParams;

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ne", "ru", "ta", "vo", "shi", "pe", "da", "zu", "gri", "ol", "en", "ax",
    "é", "ß",
];
const PUNCT: &[&str] = &[".", ",", "'", "-", "!"];

/// A text with two independent tokenizations of it.
#[derive(Debug, Clone)]
pub struct SegmentationCase {
    pub text: String,
    pub ling: Vec<Span>,
    pub sub: Vec<Span>,
}

fn piece(rng: &mut impl Rng) -> String {
    if rng.random_bool(0.1) {
        return PUNCT[rng.random_range(0..PUNCT.len())].to_string();
    }
    (0..rng.random_range(1..=2))
        .map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())])
        .collect()
}

/// Split the non-whitespace runs of a text at random points, independently
/// for the two tokenizations; tokens occasionally extend across whitespace.
pub fn random_segmentation_case(rng: &mut impl Rng, max_chunks: usize) -> SegmentationCase {
    let n_chunks = rng.random_range(0..=max_chunks);
    let mut text = String::new();
    let mut chunks: Vec<Span> = Vec::new();
    let mut pos = 0;
    for k in 0..n_chunks {
        if k > 0 {
            let gap = if rng.random_bool(0.1) {
                "  "
            } else if rng.random_bool(0.05) {
                "\n"
            } else {
                " "
            };
            text.push_str(gap);
            pos += gap.chars().count();
        }
        let chunk: String = (0..rng.random_range(1..=3)).map(|_| piece(rng)).collect();
        let len = chunk.chars().count();
        text.push_str(&chunk);
        chunks.push(Span::new(pos, pos + len));
        pos += len;
    }
    let mut split = |p_cut: f64, p_join: f64| {
        let mut spans: Vec<Span> = Vec::new();
        for (k, c) in chunks.iter().enumerate() {
            let mut start = c.start;
            for cut in c.start + 1..c.end {
                if rng.random_bool(p_cut) {
                    spans.push(Span::new(start, cut));
                    start = cut;
                }
            }
            let piece = Span::new(start, c.end);
            // Optionally glue this chunk's first piece onto the previous token.
            match spans.last_mut() {
                Some(prev) if k > 0 && start == c.start && rng.random_bool(p_join) => {
                    prev.end = piece.end
                }
                _ => spans.push(piece),
            }
        }
        spans
    };
    let ling = split(0.15, 0.08);
    let sub = split(0.35, 0.03);
    SegmentationCase { text, ling, sub }
}

/// A text of `n_words` words, each made of 1 to `max_pieces` subword
/// pieces, with linguistic tokens equal to whole words.
pub fn random_segmented_text(
    rng: &mut impl Rng,
    n_words: usize,
    max_pieces: usize,
) -> SegmentedText {
    let mut text = String::new();
    let mut ling = Vec::new();
    let mut sub = Vec::new();
    let mut pos = 0;
    for i in 0..n_words {
        if i > 0 {
            text.push(' ');
            pos += 1;
        }
        let start = pos;
        for _ in 0..rng.random_range(1..=max_pieces.max(1)) {
            let p: String = (0..rng.random_range(1..=2))
                .map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())])
                .collect();
            let len = p.chars().count();
            text.push_str(&p);
            sub.push(Span::new(pos, pos + len));
            pos += len;
        }
        ling.push(Span::new(start, pos));
    }
    reconcile_spans(&text, ling, sub).expect("generated spans are valid")
}

pub fn random_pair(
    rng: &mut impl Rng,
    candidate_words: std::ops::RangeInclusive<usize>,
    source_words: std::ops::RangeInclusive<usize>,
    max_pieces: usize,
) -> PairSegmentation {
    let n = rng.random_range(candidate_words);
    let m = rng.random_range(source_words);
    PairSegmentation::new(
        random_segmented_text(rng, n, max_pieces),
        random_segmented_text(rng, m, max_pieces),
    )
}

#[derive(Debug, Clone)]
pub struct PlantedConfig {
    pub n_pairs: usize,
    pub dim: usize,
    pub seed: u64,
    /// Euclidean norm of the hidden `W`; larger values give peakier weights.
    pub w_norm: f64,
    pub theta_c: f64,
    pub candidate_words: std::ops::RangeInclusive<usize>,
    pub source_words: std::ops::RangeInclusive<usize>,
    pub max_pieces: usize,
    pub accuracy: f64,
    pub dimension: String,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            n_pairs: 700,
            dim: 16,
            seed: 0,
            w_norm: 8.0,
            theta_c: 0.4,
            candidate_words: 4..=10,
            source_words: 10..=24,
            max_pieces: 3,
            accuracy: 0.5,
            dimension: "planted".into(),
        }
    }
}

pub struct PlantedFixture {
    pub items: Vec<PreparedPair>,
    pub planted: WeighterParams,
    pub backend: MockBackend,
}

/// Random pairs whose human score for `cfg.dimension` is exactly the
/// learned-weights score under a hidden weighter, with predictions from a
/// seeded hashing mock.
pub fn planted_fixture(cfg: &PlantedConfig, scoring: &ScoringConfig) -> PlantedFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let raw: Vec<f64> = (0..cfg.dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let planted = WeighterParams {
        w: raw.iter().map(|v| v * cfg.w_norm / norm).collect(),
        theta_c: cfg.theta_c,
        dimension_label: cfg.dimension.clone(),
    };
    let backend = MockBackend::hashed(cfg.accuracy)
        .with_dim(cfg.dim)
        .with_seed(cfg.seed);
    let items = (0..cfg.n_pairs)
        .map(|i| {
            let pair = random_pair(
                &mut rng,
                cfg.candidate_words.clone(),
                cfg.source_words.clone(),
                cfg.max_pieces,
            );
            let pair_id = format!("planted-{i:04}");
            let report = score_pair(
                &pair_id,
                &pair,
                &backend,
                WeightingScheme::Learned(&planted),
                scoring,
            )
            .expect("mock backend never fails");
            PreparedPair {
                pair_id,
                pair,
                human_scores: BTreeMap::from([(cfg.dimension.clone(), report.final_score)]),
                pos_tags: None,
            }
        })
        .collect();
    PlantedFixture {
        items,
        planted,
        backend,
    }
}

const TAGS: &[&str] = &["NOUN", "VERB", "ADJ", "DET", "PUNCT"];

fn tags_for(text: &SegmentedText) -> Vec<String> {
    (0..text.len())
        .map(|i| TAGS[text.word_text(i).chars().count() % TAGS.len()].to_string())
        .collect()
}

/// Random pairs with POS tags and human scores on a 1 to 5 scale, one per
/// entry of `dimensions`.
pub fn random_dataset(seed: u64, n_pairs: usize, dimensions: &[&str]) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n_pairs)
        .map(|i| {
            let pair = random_pair(&mut rng, 2..=10, 6..=24, 3);
            let mut record = EvalRecord::from_pair(format!("pair-{i:04}"), &pair);
            for dim in dimensions {
                let raw: f64 = rng.random_range(1.0..=5.0);
                record
                    .human_scores
                    .insert(dim.to_string(), (raw * 100.0).round() / 100.0);
            }
            record.pos_tags = Some(PosTags {
                candidate: tags_for(&pair.candidate),
                source: tags_for(&pair.source),
            });
            record
        })
        .collect();
    Dataset {
        header: Some(DatasetHeader {
            schema: crate::data::SCHEMA_VERSION,
            human_scale: Some(HumanScale { min: 1.0, max: 5.0 }),
        }),
        records,
    }
}

impl PlantedFixture {
    /// The fixture as a dataset file, human scores on a 0 to 1 scale.
    pub fn to_dataset(&self) -> Dataset {
        let records = self
            .items
            .iter()
            .map(|item| {
                let mut r = EvalRecord::from_pair(item.pair_id.clone(), &item.pair);
                r.human_scores = item.human_scores.clone();
                r
            })
            .collect();
        Dataset {
            header: Some(DatasetHeader {
                schema: crate::data::SCHEMA_VERSION,
                human_scale: Some(HumanScale { min: 0.0, max: 1.0 }),
            }),
            records,
        }
    }
}
