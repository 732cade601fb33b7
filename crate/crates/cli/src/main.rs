//! `maskeval` command-line interface.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use maskeval_core::config::{BackendKind, ConfigError, EngineConfig};
use maskeval_core::data::{load_dataset, DataError};
use maskeval_core::masking::{gen_mlm_training_example, MaskingError, MlmTrainingRecord};
use maskeval_core::optim::AdamConfig;
use maskeval_core::pipeline::{
    build_training_example, correlate, pos_weight_distribution, restrict_report, score_pair,
    selective_score, PipelineError, PosTags, PreparedPair, ScoreReport, ScoringConfig,
    WeightingScheme,
};
use maskeval_core::weighter::{
    load_weighter, train_weighter, TrainConfig, WeighterError, WeighterFile, WeighterParams,
};
use maskeval_core::{derive_seed, Backend};

#[derive(Parser)]
#[command(
    name = "maskeval",
    version,
    about = "Reference-less evaluation by successive masked-word prediction"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice; overrides MASKEVAL_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// mock-echo, mock-wrong, mock-hashed or http.
    #[arg(long, global = true)]
    backend: Option<BackendKind>,
    /// Model service base URL; overrides MASKEVAL_BACKEND_URL.
    #[arg(long, global = true)]
    backend_url: Option<String>,
    #[arg(long, global = true)]
    max_inflight: Option<usize>,
    /// Hit rate of the mock-hashed backend.
    #[arg(long, global = true)]
    mock_accuracy: Option<f64>,
    /// Write the primary output here instead of stdout.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Score every pair; one JSON report per line.
    Score {
        #[command(flatten)]
        input: Input,
        /// Score only the top steps whose weights sum to this (needs a weighter).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Fit a weighter on one dimension's human scores and save it.
    TrainWeighter {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        dimension: String,
        /// Where to save the weighter file.
        #[arg(long)]
        save: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = AdamConfig::default().lr)]
        lr: f64,
        #[arg(long, default_value_t = 0.2)]
        holdout: f64,
    },
    /// Pearson correlation with human scores; one JSON report per dimension.
    Evaluate {
        #[command(flatten)]
        input: Input,
        /// Repeatable. Defaults to the weighter's dimension, or every dimension in the dataset.
        #[arg(long)]
        dimension: Vec<String>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Masked-prediction fine-tuning examples as JSONL.
    GenMlmData {
        #[command(flatten)]
        input: Input,
        #[arg(long, default_value_t = 1)]
        per_pair: usize,
    },
    /// Mean global weight per part-of-speech tag.
    AnalyzePos {
        #[command(flatten)]
        input: Input,
    },
    /// Retained steps and correlation across selective-masking thresholds, as CSV.
    SparsitySweep {
        #[command(flatten)]
        input: Input,
        /// `a..b` (step 0.1), `a..b:step`, or a comma-separated list.
        #[arg(long, default_value = "0.1..1.0")]
        thresholds: String,
        #[arg(long)]
        dimension: Vec<String>,
    },
}

#[derive(Args)]
struct Input {
    #[arg(long)]
    dataset: PathBuf,
    /// `uniform`, `candidate-only`, or a weighter file.
    #[arg(long, alias = "weighter")]
    weights: Option<String>,
}

enum Weights {
    Uniform,
    CandidateOnly,
    Learned(WeighterParams),
}

impl Weights {
    fn scheme(&self) -> WeightingScheme<'_> {
        match self {
            Weights::Uniform => WeightingScheme::Uniform,
            Weights::CandidateOnly => WeightingScheme::CandidateOnly,
            Weights::Learned(p) => WeightingScheme::Learned(p),
        }
    }

    fn learned(&self, what: &str) -> Result<&WeighterParams> {
        match self {
            Weights::Learned(p) => Ok(p),
            _ => bail!("{what} needs a weighter file (--weights <path>)"),
        }
    }
}

struct Env {
    cfg: EngineConfig,
    scoring: ScoringConfig,
    backend: Box<dyn Backend>,
}

impl Env {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = EngineConfig::load(common.config.as_deref())?;
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        if let Some(kind) = common.backend {
            cfg.backend.kind = kind;
        }
        if let Some(url) = &common.backend_url {
            cfg.backend.url = url.clone();
        }
        if let Some(n) = common.max_inflight {
            cfg.backend.max_inflight = n;
        }
        if let Some(a) = common.mock_accuracy {
            cfg.backend.mock_accuracy = a;
        }
        cfg.validate()?;
        let backend = cfg.backend.build(cfg.seed)?;
        Ok(Self {
            scoring: cfg.scoring(),
            backend,
            cfg,
        })
    }

    fn weights(&self, arg: Option<&str>) -> Result<Weights> {
        let path = match arg {
            Some("uniform") => return Ok(Weights::Uniform),
            Some("candidate-only") => return Ok(Weights::CandidateOnly),
            Some(p) => PathBuf::from(p),
            None => match &self.cfg.weighter_path {
                Some(p) => p.clone(),
                None => return Ok(Weights::Uniform),
            },
        };
        Ok(Weights::Learned(load_weighter(&path).with_context(
            || format!("loading weighter {}", path.display()),
        )?))
    }

    fn score(
        &self,
        item: &PreparedPair,
        weights: &Weights,
        threshold: Option<f64>,
    ) -> Result<ScoreReport, PipelineError> {
        match threshold {
            None => score_pair(
                &item.pair_id,
                &item.pair,
                &*self.backend,
                weights.scheme(),
                &self.scoring,
            ),
            Some(t) => {
                let params = match weights {
                    Weights::Learned(p) => p,
                    _ => return Err(PipelineError::InvalidThreshold(t)),
                };
                selective_score(
                    &item.pair_id,
                    &item.pair,
                    &*self.backend,
                    params,
                    t,
                    &self.scoring,
                )
            }
        }
    }
}

fn load_items(path: &Path) -> Result<Vec<PreparedPair>> {
    let ds = load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    Ok(ds.prepare()?)
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json_line(out: &mut dyn Write, value: &impl serde::Serialize) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

/// Pair failures are reported per line and make the command exit non-zero
/// once all output is written.
struct PartialFailure(usize);

impl std::fmt::Display for PartialFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} pair(s) failed", self.0)
    }
}

impl std::fmt::Debug for PartialFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Display::fmt(self, f)
    }
}

impl std::error::Error for PartialFailure {}

fn cmd_score(env: &Env, input: &Input, threshold: Option<f64>, out: &mut dyn Write) -> Result<()> {
    let weights = env.weights(input.weights.as_deref())?;
    if threshold.is_some() {
        weights.learned("--threshold")?;
    }
    let items = load_items(&input.dataset)?;
    let mut failed = 0;
    for item in &items {
        match env.score(item, &weights, threshold) {
            Ok(report) => write_json_line(out, &report)?,
            Err(PipelineError::PairFailed { pair_id, failures }) => {
                failed += 1;
                let error = failures
                    .last()
                    .map(|f| f.error.to_string())
                    .unwrap_or_default();
                write_json_line(
                    out,
                    &json!({ "pair_id": pair_id, "failed": true, "error": error, "failures": failures }),
                )?;
            }
            Err(e) => return Err(e.into()),
        }
    }
    out.flush()?;
    if failed > 0 {
        return Err(PartialFailure(failed).into());
    }
    Ok(())
}

fn cmd_train(
    env: &Env,
    input: &Input,
    dimension: &str,
    save: &Path,
    train: TrainConfig,
    out: &mut dyn Write,
) -> Result<()> {
    let items = load_items(&input.dataset)?;
    let mut examples = Vec::new();
    let mut skipped = 0;
    let mut failed = 0;
    for item in &items {
        if !item.human_scores.contains_key(dimension) {
            skipped += 1;
            continue;
        }
        match build_training_example(item, &*env.backend, dimension, &env.scoring) {
            Ok(ex) => examples.push(ex),
            Err(PipelineError::PairFailed { .. }) => failed += 1,
            Err(e) => return Err(e.into()),
        }
    }
    let trained = train_weighter(&examples, dimension, &train)?;
    WeighterFile::new(&trained.params, Some(trained.meta(&train))).save(save)?;
    write_json_line(
        out,
        &json!({
            "dimension_label": dimension,
            "d": trained.params.dim(),
            "n_examples": examples.len(),
            "n_train": trained.train_indices.len(),
            "n_val": trained.val_indices.len(),
            "n_skipped": skipped,
            "n_failed": failed,
            "best_epoch": trained.best_epoch,
            "best_val_loss": trained.best_val_loss,
            "theta_c": trained.params.theta_c,
            "history": trained.history,
        }),
    )?;
    Ok(())
}

fn dimensions_for(requested: &[String], weights: &Weights, items: &[PreparedPair]) -> Vec<String> {
    if !requested.is_empty() {
        return requested.to_vec();
    }
    if let Weights::Learned(p) = weights {
        return vec![p.dimension_label.clone()];
    }
    let all: BTreeSet<&String> = items.iter().flat_map(|it| it.human_scores.keys()).collect();
    all.into_iter().cloned().collect()
}

/// Reports for every pair, with `None` for pairs whose backend calls failed.
fn score_all(
    env: &Env,
    items: &[PreparedPair],
    weights: &Weights,
    threshold: Option<f64>,
) -> Result<Vec<Option<ScoreReport>>> {
    items
        .iter()
        .map(|item| match env.score(item, weights, threshold) {
            Ok(r) => Ok(Some(r)),
            Err(PipelineError::PairFailed { .. }) => Ok(None),
            Err(e) => Err(e.into()),
        })
        .collect()
}

fn correlate_dimension(
    items: &[PreparedPair],
    scores: &[Option<f64>],
    dimension: &str,
) -> Result<maskeval_core::CorrelationReport, PipelineError> {
    let mut pairs = Vec::new();
    let mut failed = 0;
    for (item, score) in items.iter().zip(scores) {
        let Some(&human) = item.human_scores.get(dimension) else {
            continue;
        };
        match score {
            Some(s) => pairs.push((*s, human)),
            None => failed += 1,
        }
    }
    correlate(dimension, &pairs, failed)
}

fn cmd_evaluate(
    env: &Env,
    input: &Input,
    dims: &[String],
    threshold: Option<f64>,
    out: &mut dyn Write,
) -> Result<()> {
    let weights = env.weights(input.weights.as_deref())?;
    if threshold.is_some() {
        weights.learned("--threshold")?;
    }
    let items = load_items(&input.dataset)?;
    let dims = dimensions_for(dims, &weights, &items);
    if dims.is_empty() {
        bail!("the dataset has no human scores to correlate with");
    }
    let scores: Vec<Option<f64>> = score_all(env, &items, &weights, threshold)?
        .into_iter()
        .map(|r| r.map(|r| r.final_score))
        .collect();
    for dim in &dims {
        write_json_line(out, &correlate_dimension(&items, &scores, dim)?)?;
    }
    Ok(())
}

fn cmd_gen_mlm(env: &Env, input: &Input, per_pair: usize, out: &mut dyn Write) -> Result<()> {
    let items = load_items(&input.dataset)?;
    let mut skipped = 0;
    for (i, item) in items.iter().enumerate() {
        for k in 0..per_pair {
            let seed = derive_seed(env.cfg.seed, (i * per_pair + k) as u64);
            match gen_mlm_training_example(&item.pair, seed, &env.cfg.window) {
                Ok(seq) => {
                    write_json_line(out, &MlmTrainingRecord::new(item.pair_id.clone(), seq))?
                }
                Err(MaskingError::EmptySide(_)) => {
                    skipped += 1;
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    if skipped > 0 {
        eprintln!(
            "{}",
            json!({ "warning": "pairs with an empty text were skipped", "n_skipped": skipped })
        );
    }
    Ok(())
}

fn cmd_analyze_pos(env: &Env, input: &Input, out: &mut dyn Write) -> Result<()> {
    let weights = env.weights(input.weights.as_deref())?;
    let items: Vec<PreparedPair> = load_items(&input.dataset)?
        .into_iter()
        .filter(|it| it.pos_tags.is_some())
        .collect();
    if items.is_empty() {
        bail!("no record in the dataset carries pos_tags");
    }
    let mut reports = Vec::new();
    let mut tags: Vec<PosTags> = Vec::new();
    for (item, report) in items.iter().zip(score_all(env, &items, &weights, None)?) {
        if let Some(r) = report {
            reports.push(r);
            tags.push(item.pos_tags.clone().expect("filtered above"));
        }
    }
    let dist = pos_weight_distribution(&reports, &tags)?;
    write_json_line(
        out,
        &json!({ "distribution": dist, "n_failed": items.len() - reports.len() }),
    )
}

/// Parse `a..b`, `a..b:step` or `t1,t2,...` into thresholds in (0, 1].
fn parse_thresholds(spec: &str) -> Result<Vec<f64>> {
    let parse = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .with_context(|| format!("bad threshold {s:?}"))
    };
    let grid = if let Some((a, rest)) = spec.split_once("..") {
        let (b, step) = match rest.split_once(':') {
            Some((b, s)) => (parse(b)?, parse(s)?),
            None => (parse(rest)?, 0.1),
        };
        let a = parse(a)?;
        if step.is_nan() || step <= 0.0 || b < a {
            bail!("bad threshold range {spec:?}");
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        // Round to 12 decimals so 0.1 steps print as written.
        (0..=n)
            .map(|k| ((a + k as f64 * step) * 1e12).round() / 1e12)
            .collect()
    } else {
        spec.split(',').map(parse).collect::<Result<Vec<_>>>()?
    };
    if let Some(t) = grid.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        bail!(PipelineError::InvalidThreshold(*t));
    }
    Ok(grid)
}

fn cmd_sweep(
    env: &Env,
    input: &Input,
    thresholds: &str,
    dims: &[String],
    out: &mut dyn Write,
) -> Result<()> {
    let grid = parse_thresholds(thresholds)?;
    let weights = env.weights(input.weights.as_deref())?;
    weights.learned("sparsity-sweep")?;
    let items = load_items(&input.dataset)?;
    let dims = dimensions_for(dims, &weights, &items);
    let full = score_all(env, &items, &weights, None)?;

    writeln!(out, "threshold,dimension,retained_mean,pearson_r")?;
    for &t in &grid {
        let restricted: Vec<Option<ScoreReport>> = full
            .iter()
            .map(|r| {
                r.as_ref()
                    .map(|r| restrict_report(r, t, env.scoring.renormalize_selective))
                    .transpose()
            })
            .collect::<Result<_, _>>()?;
        let scores: Vec<Option<f64>> = restricted
            .iter()
            .map(|r| r.as_ref().map(|r| r.final_score))
            .collect();
        for dim in &dims {
            let mut fractions = Vec::new();
            for (item, r) in items.iter().zip(&restricted) {
                if let (Some(r), true) = (r, item.human_scores.contains_key(dim)) {
                    let kept = r.retained_steps.as_ref().map_or(0, Vec::len);
                    fractions.push(kept as f64 / item.pair.step_count() as f64);
                }
            }
            let retained_mean = fractions.iter().sum::<f64>() / fractions.len().max(1) as f64;
            let r = correlate_dimension(&items, &scores, dim)?;
            writeln!(out, "{t},{dim},{retained_mean},{}", r.pearson_r)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let env = Env::new(&cli.common)?;
    let mut out = open_output(cli.common.output.as_deref())?;
    let out = &mut *out;
    match &cli.command {
        Command::Score { input, threshold } => cmd_score(&env, input, *threshold, out)?,
        Command::TrainWeighter {
            input,
            dimension,
            save,
            epochs,
            lr,
            holdout,
        } => {
            let train = TrainConfig {
                epochs: *epochs,
                holdout_fraction: *holdout,
                seed: env.cfg.seed,
                adam: AdamConfig {
                    lr: *lr,
                    ..AdamConfig::default()
                },
            };
            cmd_train(&env, input, dimension, save, train, out)?
        }
        Command::Evaluate {
            input,
            dimension,
            threshold,
        } => cmd_evaluate(&env, input, dimension, *threshold, out)?,
        Command::GenMlmData { input, per_pair } => cmd_gen_mlm(&env, input, *per_pair, out)?,
        Command::AnalyzePos { input } => cmd_analyze_pos(&env, input, out)?,
        Command::SparsitySweep {
            input,
            thresholds,
            dimension,
        } => cmd_sweep(&env, input, thresholds, dimension, out)?,
    }
    out.flush()?;
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if cause.is::<DataError>() {
            return "data";
        }
        if cause.is::<ConfigError>() {
            return "config";
        }
        if cause.is::<WeighterError>() {
            return "weighter";
        }
        if cause.is::<PipelineError>() || cause.is::<MaskingError>() {
            return "pipeline";
        }
        if cause.is::<PartialFailure>() {
            return "pair_failed";
        }
        if cause.is::<io::Error>() {
            return "io";
        }
    }
    "usage"
}

/// The reader of our output went away, as with `| head`.
fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        let kind = c
            .downcast_ref::<io::Error>()
            .map(io::Error::kind)
            .or_else(|| {
                c.downcast_ref::<serde_json::Error>()
                    .and_then(serde_json::Error::io_error_kind)
            });
        kind == Some(io::ErrorKind::BrokenPipe)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = error_kind(&e);
            let message = format!("{e:#}");
            eprintln!(
                "{}",
                json!({ "error": { "kind": kind, "message": message } })
            );
            ExitCode::from(if kind == "pair_failed" { 2 } else { 1 })
        }
    }
}
