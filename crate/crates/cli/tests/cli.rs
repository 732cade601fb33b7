use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maskeval_core::data::{load_dataset, save_dataset};
use maskeval_core::pipeline::{evaluate_correlation, ScoringConfig, WeightingScheme};
use maskeval_core::synthetic::random_dataset;
use maskeval_core::weighter::load_weighter;
use maskeval_core::MockBackend;
use serde_json::Value;

fn maskeval(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskeval"))
        .args(args)
        .env_remove("MASKEVAL_SEED")
        .env_remove("MASKEVAL_BACKEND_URL")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = maskeval(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json_lines(s: &str) -> Vec<Value> {
    s.lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn fixture(dir: &Path, n: usize) -> PathBuf {
    let path = dir.join("data.jsonl");
    save_dataset(&path, &random_dataset(5, n, &["fluency", "coherence"])).unwrap();
    path
}

#[test]
fn echo_scores_every_pair_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path(), 10);
    let d = data.to_str().unwrap();
    let lines = json_lines(&ok(&[
        "score",
        "--dataset",
        d,
        "--backend",
        "mock-echo",
        "--weights",
        "uniform",
    ]));
    assert_eq!(lines.len(), 10);
    assert!(lines.iter().all(|l| l["final_score"] == 1.0));
    let wrong = json_lines(&ok(&[
        "score",
        "--dataset",
        d,
        "--backend",
        "mock-wrong",
        "--weights",
        "candidate-only",
    ]));
    assert!(wrong.iter().all(|l| l["final_score"] == 0.0));
}

#[test]
fn evaluate_matches_library_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path(), 30);
    let d = data.to_str().unwrap();
    let out = ok(&[
        "evaluate",
        "--dataset",
        d,
        "--backend",
        "mock-hashed",
        "--seed",
        "9",
        "--dimension",
        "fluency",
    ]);
    let report: Value = serde_json::from_str(out.trim()).unwrap();

    let items = load_dataset(&data).unwrap().prepare().unwrap();
    let backend = MockBackend::hashed(0.5).with_seed(9);
    let expected = evaluate_correlation(
        &items,
        &backend,
        WeightingScheme::Uniform,
        "fluency",
        &ScoringConfig::default(),
    )
    .unwrap();
    assert_eq!(report["pearson_r"].as_f64().unwrap(), expected.pearson_r);
    assert_eq!(report["n_pairs"], 30);
    assert_eq!(report["dimension_label"], "fluency");

    let both = json_lines(&ok(&[
        "evaluate",
        "--dataset",
        d,
        "--backend",
        "mock-hashed",
        "--seed",
        "9",
    ]));
    assert_eq!(both.len(), 2);
    assert_eq!(both[1]["pearson_r"], report["pearson_r"]);
}

#[test]
fn train_then_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path(), 25);
    let d = data.to_str().unwrap();
    let w = dir.path().join("w.json");
    let summary = ok(&[
        "train-weighter",
        "--dataset",
        d,
        "--backend",
        "mock-hashed",
        "--dimension",
        "fluency",
        "--save",
        w.to_str().unwrap(),
        "--epochs",
        "3",
        "--lr",
        "0.01",
    ]);
    let summary: Value = serde_json::from_str(summary.trim()).unwrap();
    assert_eq!(summary["n_val"], 5);
    assert_eq!(summary["history"].as_array().unwrap().len(), 4);
    let params = load_weighter(&w).unwrap();
    assert_eq!(
        (params.dim(), params.dimension_label.as_str()),
        (16, "fluency")
    );

    let csv = ok(&[
        "sparsity-sweep",
        "--dataset",
        d,
        "--backend",
        "mock-hashed",
        "--weights",
        w.to_str().unwrap(),
    ]);
    let mut rows = csv.lines();
    assert_eq!(
        rows.next(),
        Some("threshold,dimension,retained_mean,pearson_r")
    );
    let rows: Vec<Vec<&str>> = rows.map(|r| r.split(',').collect()).collect();
    assert_eq!(rows.len(), 10);
    let retained: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(retained.windows(2).all(|w| w[0] <= w[1]), "{retained:?}");
    assert_eq!(retained[9], 1.0);
    assert!(rows.iter().all(|r| r[1] == "fluency"));

    // At threshold 1 the sweep agrees with a full learned evaluation.
    let eval = ok(&[
        "evaluate",
        "--dataset",
        d,
        "--backend",
        "mock-hashed",
        "--weights",
        w.to_str().unwrap(),
    ]);
    let eval: Value = serde_json::from_str(eval.trim()).unwrap();
    assert_eq!(
        rows[9][3].parse::<f64>().unwrap(),
        eval["pearson_r"].as_f64().unwrap()
    );

    let sel = json_lines(&ok(&[
        "score",
        "--dataset",
        d,
        "--backend",
        "mock-hashed",
        "--weights",
        w.to_str().unwrap(),
        "--threshold",
        "0.5",
    ]));
    assert!(sel.iter().all(|l| l["retained_steps"].is_array()));
}

#[test]
fn pos_analysis_sums_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path(), 12);
    let out = ok(&["analyze-pos", "--dataset", data.to_str().unwrap()]);
    let v: Value = serde_json::from_str(out.trim()).unwrap();
    let dist = &v["distribution"];
    let total: f64 = ["candidate", "source"]
        .iter()
        .flat_map(|side| dist[side].as_object().unwrap().values())
        .map(|x| x.as_f64().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert_eq!(dist["n_pairs"], 12);
}

#[test]
fn gen_mlm_data_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path(), 8);
    let d = data.to_str().unwrap();
    let a = ok(&[
        "gen-mlm-data",
        "--dataset",
        d,
        "--seed",
        "1",
        "--per-pair",
        "3",
    ]);
    let b = ok(&[
        "gen-mlm-data",
        "--dataset",
        d,
        "--seed",
        "2",
        "--per-pair",
        "3",
    ]);
    assert_eq!(a.lines().count(), 24);
    assert_ne!(a, b);
    for line in json_lines(&a) {
        let tokens = line["input_tokens"].as_array().unwrap();
        assert_eq!(tokens.iter().filter(|t| *t == "<extra_id_0>").count(), 1);
        assert_eq!(tokens.iter().filter(|t| *t == "<sep>").count(), 1);
    }
}

#[test]
fn flags_beat_env_beat_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path(), 6);
    let d = data.to_str().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 11\n[backend]\nkind = \"mock-hashed\"\n").unwrap();
    let c = cfg.to_str().unwrap();

    let run = |env_seed: Option<&str>, extra: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_maskeval"));
        cmd.args(["gen-mlm-data", "--dataset", d, "--config", c])
            .args(extra)
            .env_remove("MASKEVAL_SEED");
        if let Some(s) = env_seed {
            cmd.env("MASKEVAL_SEED", s);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success());
        out.stdout
    };
    let seeded = |s: &str| ok(&["gen-mlm-data", "--dataset", d, "--seed", s]).into_bytes();
    assert_eq!(run(None, &[]), seeded("11"));
    assert_eq!(run(Some("12"), &[]), seeded("12"));
    assert_eq!(run(Some("12"), &["--seed", "13"]), seeded("13"));
}

#[test]
fn output_flag_writes_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path(), 4);
    let target = dir.path().join("out.jsonl");
    let stdout = ok(&[
        "score",
        "--dataset",
        data.to_str().unwrap(),
        "--output",
        target.to_str().unwrap(),
    ]);
    assert!(stdout.is_empty());
    assert_eq!(std::fs::read_to_string(&target).unwrap().lines().count(), 4);
}

fn error_of(out: &Output) -> Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    serde_json::from_str::<Value>(stderr.lines().last().unwrap()).unwrap()["error"].clone()
}

#[test]
fn structured_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        "{\"schema\":1}\n{\"pair_id\":\"a\",\"candidate_text\":\"ab cd\",\"source_text\":\"x\",\
         \"candidate_ling_spans\":[[0,2],[1,5]],\"candidate_sub_spans\":[[0,5]],\
         \"source_ling_spans\":[[0,1]],\"source_sub_spans\":[[0,1]]}\n",
    )
    .unwrap();
    let out = maskeval(&["score", "--dataset", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    let err = error_of(&out);
    assert_eq!(err["kind"], "data");
    assert!(err["message"].as_str().unwrap().contains("line 2"), "{err}");

    let data = fixture(dir.path(), 4);
    let d = data.to_str().unwrap();
    let out = maskeval(&["sparsity-sweep", "--dataset", d, "--weights", "uniform"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["kind"], "usage");

    let out = maskeval(&[
        "sparsity-sweep",
        "--dataset",
        d,
        "--weights",
        "missing.json",
    ]);
    assert_eq!(error_of(&out)["kind"], "weighter");

    let out = maskeval(&["score", "--dataset", d, "--backend", "nonsense"]);
    assert!(!out.status.success());

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(ok(&["score", "--dataset", empty.to_str().unwrap()]), "");
}

#[test]
fn unreachable_service_marks_pairs_failed() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path(), 2);
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "[backend]\nkind = \"http\"\nretry_base_delay_ms = 1\n",
    )
    .unwrap();
    let out = maskeval(&[
        "score",
        "--dataset",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--backend-url",
        &format!("http://127.0.0.1:{port}"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let lines = json_lines(std::str::from_utf8(&out.stdout).unwrap());
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|l| l["failed"] == true));
    assert_eq!(error_of(&out)["kind"], "pair_failed");
}
