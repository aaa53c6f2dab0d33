mod common;

use std::fs;
use std::time::Instant;

use common::*;
use faithful_core::aligner::{load_checkpoint, AlignerParams};
use serde_json::Value;
use tempfile::tempdir;

fn json_file(path: &std::path::Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_documents_every_flag() {
    let cases: [(&[&str], &[&str]); 8] = [
        (&["--help"], &["train", "curate", "analyze", "gradcheck", "--verbose"]),
        (&["train", "--help"], &["--config", "--output-dir", "--seed", "--steps", "--pooling", "--n-pairs", "--learning-rate"]),
        (&["curate", "--help"], &["--input", "--output", "--config", "--threshold", "--max-faces", "--median-window", "--prompts", "--seed"]),
        (&["analyze", "--help"], &["activations", "project", "perturb", "ablate"]),
        (&["analyze", "activations", "--help"], &["--config", "--checkpoint", "--output-dir", "--seed", "--k"]),
        (&["analyze", "perturb", "--help"], &["--ranges"]),
        (&["analyze", "ablate", "--help"], &["--pooling", "--atoms", "--euler", "--seeds", "--perturb-range"]),
        (&["gradcheck", "--help"], &["--tokens", "--features", "--dim", "--atoms", "--pairs", "--samples", "--step", "--pooling", "--euler", "--seed"]),
    ];
    let dir = tempdir().unwrap();
    for (args, flags) in cases {
        let o = run(dir.path(), args);
        assert_eq!(code(&o), 0, "{args:?}");
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{args:?} help lacks {f}:\n{text}");
        }
    }
    let o = run(dir.path(), &["analyze", "project", "--help"]);
    assert!(stdout(&o).contains("--identities") && stdout(&o).contains("--poses"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&run(dir.path(), &["train"])), 1);
    assert_eq!(code(&run(dir.path(), &["gradcheck", "--pooling", "median"])), 1);
}

#[test]
fn train_zero_steps_writes_initialization() {
    let dir = tempdir().unwrap();
    write(dir.path(), "c.json", &small_config("run", 100));
    let o = run(dir.path(), &["train", "--config", "c.json", "--steps", "0", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (cfg, params) = load_checkpoint(&dir.path().join("run/checkpoint.json")).unwrap();
    // Checkpoints store f32.
    let init = AlignerParams::init(&cfg, 7).unwrap();
    let init = AlignerParams::from_parts(
        init.tokenizer.mapv(|v| v as f32 as f64),
        init.euler_proj.mapv(|v| v as f32 as f64),
        init.dictionary.mapv(|v| v as f32 as f64),
        init.log_scale as f32 as f64,
    )
    .unwrap();
    assert_eq!(params.tokenizer, init.tokenizer);
    assert_eq!(params.euler_proj, init.euler_proj);
    assert_eq!(params.dictionary, init.dictionary);
    assert_eq!(params.log_scale, init.log_scale);
    let metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics, "step,pia_loss,mi_lower_bound,temperature,grad_norm\n");

    let meta = json_file(&dir.path().join("run/run_meta.json"));
    assert_eq!(meta["seed"], 7);
    assert_eq!(meta["seed_source"], "flag");
    let keys: Vec<&str> = meta["overrides"].as_array().unwrap().iter().map(|o| o["key"].as_str().unwrap()).collect();
    assert_eq!(keys, ["train.steps"]);
    assert!(stdout(&o).contains("retrieval accuracy"));
}

#[test]
fn train_outputs_are_reproducible_and_config_echoes() {
    let dir = tempdir().unwrap();
    write(dir.path(), "c.json", &small_config("a", 40));
    assert_eq!(code(&run(dir.path(), &["train", "--config", "c.json"])), 0);
    assert_eq!(code(&run(dir.path(), &["train", "--config", "c.json", "--output-dir", "b"])), 0);
    for f in ["metrics.csv", "checkpoint.json"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    let metrics = fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 41);

    // The effective config recorded in run_meta.json reproduces the run.
    let meta = json_file(&dir.path().join("a/run_meta.json"));
    let mut echoed = meta["config"].clone();
    echoed["output_dir"] = Value::from("c");
    write(dir.path(), "echo.json", &serde_json::to_string_pretty(&echoed).unwrap());
    assert_eq!(code(&run(dir.path(), &["train", "--config", "echo.json"])), 0);
    assert_eq!(fs::read(dir.path().join("a/metrics.csv")).unwrap(), fs::read(dir.path().join("c/metrics.csv")).unwrap());
}

#[test]
fn train_config_errors() {
    let dir = tempdir().unwrap();
    let o = run(dir.path(), &["train", "--config", "missing.json"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing.json"), "{}", stderr(&o));

    write(dir.path(), "u.json", r#"{"train": {"stepz": 3}}"#);
    let o = run(dir.path(), &["train", "--config", "u.json"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("stepz"));

    write(dir.path(), "z.json", r#"{"train": {"C": 0}}"#);
    assert_eq!(code(&run(dir.path(), &["train", "--config", "z.json"])), 1);
}

#[test]
fn diverging_training_exits_two() {
    let dir = tempdir().unwrap();
    let mut cfg: Value = serde_json::from_str(&small_config("run", 10)).unwrap();
    cfg["train"]["learning_rate"] = Value::from(1e300);
    write(dir.path(), "c.json", &cfg.to_string());
    let o = run(dir.path(), &["train", "--config", "c.json"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("at step"), "{}", stderr(&o));
    // Rows written before the abort survive.
    assert!(fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap().lines().count() >= 2);
}

#[test]
fn seed_precedence() {
    let dir = tempdir().unwrap();
    write(dir.path(), "c.json", &small_config("run", 0));
    let meta = |args: &[&str], env: Option<&str>| {
        let mut c = bin();
        c.current_dir(dir.path()).args(args);
        if let Some(e) = env {
            c.env("FAITHFUL_SEED", e);
        }
        let o = c.output().unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let m = json_file(&dir.path().join("run/run_meta.json"));
        (m["seed"].as_u64().unwrap(), m["seed_source"].as_str().unwrap().to_string())
    };
    assert_eq!(meta(&["train", "--config", "c.json"], None), (0, "default".into()));
    assert_eq!(meta(&["train", "--config", "c.json"], Some("11")), (11, "env".into()));
    assert_eq!(meta(&["train", "--config", "c.json", "--seed", "5"], Some("11")), (5, "flag".into()));

    let mut cfg: Value = serde_json::from_str(&small_config("run", 0)).unwrap();
    cfg["seed"] = Value::from(3);
    write(dir.path(), "c.json", &cfg.to_string());
    assert_eq!(meta(&["train", "--config", "c.json"], Some("11")), (3, "config".into()));

    let o = bin().current_dir(dir.path()).args(["gradcheck", "--samples", "5"]).env("FAITHFUL_SEED", "x").output().unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn curate_fixture_and_flags() {
    let dir = tempdir().unwrap();
    write(dir.path(), "tracks.jsonl", &fixture_jsonl());
    write(dir.path(), "prompts.json", r#"{"v05": "a woman turns her head"}"#);
    let o = run(dir.path(), &["curate", "--input", "tracks.jsonl", "--output", "out/manifest.json", "--prompts", "prompts.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let accepted = FIXTURE.iter().filter(|t| t.expected_reason() == "ok").count();
    let count = |r: &str| FIXTURE.iter().filter(|t| t.expected_reason() == r).count();
    let expected = format!(
        "accepted: {accepted}  no_face: {}  multi_face: {}  low_variation: {}",
        count("no_face"),
        count("multi_face"),
        count("low_variation")
    );
    assert_eq!(stdout(&o).trim(), expected);

    let m = json_file(&dir.path().join("out/manifest.json"));
    assert_eq!(m["format_version"], 1);
    assert_eq!(m["threshold"], 120.0);
    let entries = m["entries"].as_array().unwrap();
    assert_eq!(entries.len(), accepted);
    assert_eq!(entries[0]["video_id"], "v05");
    assert_eq!(entries[0]["prompt"], "a woman turns her head");
    for e in entries {
        let pair = e["pair"].as_array().unwrap();
        assert!(pair[0]["frame_index"].as_u64() < pair[1]["frame_index"].as_u64());
        // bbox 300,120,420,270 enlarged 1.5x
        assert_eq!(pair[0]["crop"], serde_json::json!([270.0, 82.0, 450.0, 308.0]));
    }

    let o = run(dir.path(), &["curate", "--input", "tracks.jsonl", "--output", "zero.json", "--threshold", "0"]);
    assert_eq!(code(&o), 0);
    let ids: Vec<String> = json_file(&dir.path().join("zero.json"))["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["video_id"].as_str().unwrap().to_string())
        .collect();
    for t in FIXTURE.iter().filter(|t| matches!(t.expected_reason(), "ok" | "low_variation") && t.var() > 0.0) {
        assert!(ids.iter().any(|i| i == t.id), "{} should pass a zero threshold", t.id);
    }

    let o = run(dir.path(), &["curate", "--input", "tracks.jsonl", "--output", "two.json", "--max-faces", "2"]);
    assert!(stdout(&o).contains("multi_face: 0"));
}

#[test]
fn curate_edge_inputs() {
    let dir = tempdir().unwrap();
    write(dir.path(), "empty.jsonl", "");
    let o = run(dir.path(), &["curate", "--input", "empty.jsonl", "--output", "m.json"]);
    assert_eq!(code(&o), 0);
    let m = json_file(&dir.path().join("m.json"));
    assert_eq!(m["entries"].as_array().unwrap().len(), 0);

    let good = fixture_jsonl().lines().next().unwrap().to_string();
    write(dir.path(), "bad.jsonl", &format!("{good}\n{{\"video_id\": \"x\", \"width\": 8}}\n"));
    let o = run(dir.path(), &["curate", "--input", "bad.jsonl", "--output", "m.json"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let o = run(dir.path(), &["curate", "--input", "nope.jsonl", "--output", "m.json"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nope.jsonl"));

    write(dir.path(), "dup.jsonl", &format!("{good}\n{good}\n"));
    assert_eq!(code(&run(dir.path(), &["curate", "--input", "dup.jsonl", "--output", "m.json"])), 1);
    assert_eq!(code(&run(dir.path(), &["curate", "--input", "empty.jsonl", "--output", "m.json", "--median-window", "2"])), 1);
}

#[test]
fn analyze_commands() {
    let dir = tempdir().unwrap();
    write(dir.path(), "c.json", &small_config("run", 30));
    assert_eq!(code(&run(dir.path(), &["train", "--config", "c.json"])), 0);
    let ck = ["--config", "c.json", "--checkpoint", "run/checkpoint.json"];
    let args = |sub: &[&'static str]| -> Vec<&str> { ["analyze"].iter().chain(sub).chain(ck.iter()).copied().collect() };

    let o = run(dir.path(), &args(&["project"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let proj = fs::read_to_string(dir.path().join("run/projection.csv")).unwrap();
    assert_eq!(proj.lines().next().unwrap(), "id,bucket,x,y");
    assert_eq!(proj.lines().count(), 1 + 7 * 8);

    let o = run(dir.path(), &args(&["perturb", "--ranges", "0"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let pert = fs::read_to_string(dir.path().join("run/perturbation.csv")).unwrap();
    let rows: Vec<&str> = pert.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].split(',').nth(1).unwrap(), "0");

    let o = run(dir.path(), &args(&["activations"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let act = fs::read_to_string(dir.path().join("run/activation_stats.csv")).unwrap();
    assert!(act.starts_with("bucket,samples,within_jaccard,cross_jaccard,top_atoms\n"));
    assert!(act.lines().last().unwrap().starts_with("all,36,"));

    let o = run(dir.path(), &["analyze", "ablate", "--config", "c.json", "--pooling", "max,mean,sum"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let abl = fs::read_to_string(dir.path().join("run/ablation.csv")).unwrap();
    assert_eq!(abl.lines().count(), 4);
    assert!(abl.starts_with("pooling,num_atoms,euler,perturb_range,seeds,final_loss,retrieval_accuracy,mean_drift\n"));

    // Outputs stay inside the output directory.
    let mut top: Vec<String> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    top.sort();
    assert_eq!(top, ["c.json", "run"]);
}

#[test]
fn analyze_rejects_mismatched_checkpoint() {
    let dir = tempdir().unwrap();
    write(dir.path(), "c.json", &small_config("run", 0));
    assert_eq!(code(&run(dir.path(), &["train", "--config", "c.json"])), 0);
    let mut other: Value = serde_json::from_str(&small_config("run", 0)).unwrap();
    other["train"]["C"] = Value::from(32);
    write(dir.path(), "other.json", &other.to_string());
    let o = run(dir.path(), &["analyze", "project", "--config", "other.json", "--checkpoint", "run/checkpoint.json"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("C = 16") && stderr(&o).contains("C = 32"), "{}", stderr(&o));

    let o = run(dir.path(), &["analyze", "project", "--config", "c.json"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--checkpoint"));
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempdir().unwrap();
    let start = Instant::now();
    let o = run(dir.path(), &["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(start.elapsed().as_secs_f64() < 10.0);
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("pooling=")).count(), 6);

    let o = run(dir.path(), &["gradcheck", "--corrupt"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("worst coordinate"), "{}", stderr(&o));

    assert_eq!(code(&run(dir.path(), &["gradcheck", "--samples", "0"])), 1);
    assert_eq!(code(&run(dir.path(), &["gradcheck", "--dim", "4"])), 1);
}
