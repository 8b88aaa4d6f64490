// SPDX-License-Identifier: Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

use logxfer::config::PipelineConfig;
use logxfer::model::ModelConfig;

fn logxfer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_logxfer"))
        .args(args)
        .output()
        .expect("spawn logxfer")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

/// Small enough that every stage finishes in a second or two.
fn tiny_config(dir: &Path) -> String {
    let mut cfg = PipelineConfig::desk();
    cfg.model = ModelConfig {
        d: 16,
        heads: 2,
        layers: 1,
        ffn_dim: 32,
        adapter_dim: 4,
        head_hidden: 8,
        seq_len: 20,
        dropout: 0.1,
    };
    cfg.embedder.dim = 16;
    cfg.train.epochs = 2;
    cfg.synth.source_lines = 2000;
    cfg.synth.target_lines = 2000;
    cfg.synth.anomaly_rate = 0.1;
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn help_lists_exit_codes() {
    let out = logxfer(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Exit codes"), "{text}");
    for sub in ["parse", "sessionize", "embed", "pretrain", "tune", "eval", "experiment"] {
        assert!(text.contains(sub), "missing {sub}");
    }
}

#[test]
fn bad_flags_exit_2() {
    let out = logxfer(&["pretrain", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "config");
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"model": {"depth": 4}}"#).unwrap();
    let out = logxfer(&[
        "--config",
        cfg.to_str().unwrap(),
        "parse",
        "--input",
        "x.log",
        "--out",
        "o",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["exit_code"], 2);
    assert!(err["message"].as_str().unwrap().contains("depth"));
}

#[test]
fn missing_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = logxfer(&[
        "parse",
        "--input",
        dir.path().join("absent.log").to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["exit_code"], 3);
}

#[test]
fn stages_chain_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny_config(root);
    let p = |rel: &str| root.join(rel).to_str().unwrap().to_string();
    let run = |args: &[&str]| {
        let mut full = vec!["--config", cfg.as_str()];
        full.extend_from_slice(args);
        let out = logxfer(&full);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    };

    run(&["synth", "--out", &p("raw")]);
    assert!(root.join("raw/source/source.log").is_file());
    assert!(root.join("raw/target/ground_truth.jsonl").is_file());

    for dom in ["source", "target"] {
        let data = p(dom);
        let parsed = run(&["parse", "--input", &p(&format!("raw/{dom}/{dom}.log")), "--out", &data]);
        let v: serde_json::Value = serde_json::from_str(&parsed).unwrap();
        assert_eq!(v["lines"], 2000);
        run(&["sessionize", "--out", &data]);
        run(&["embed", "--out", &data]);
        for f in [
            "templates.json",
            "sessions_train.jsonl",
            "sessions_dev.jsonl",
            "sessions_test.jsonl",
            "embeddings.bin",
        ] {
            assert!(root.join(dom).join(f).is_file(), "{dom}/{f}");
        }
    }

    run(&["pretrain", "--data", &p("source"), "--out", &p("pre")]);
    assert!(root.join("pre/model.ckpt").is_file());
    assert!(root.join("pre/config.json").is_file());
    let lines = std::fs::read_to_string(root.join("pre/metrics.jsonl")).unwrap();
    assert!(lines.lines().count() > 0);

    let tuned = run(&[
        "tune",
        "--mode",
        "adapter",
        "--from",
        &p("pre/model.ckpt"),
        "--data",
        &p("target"),
        "--out",
        &p("ada"),
        "--subsample-n",
        "40",
    ]);
    let v: serde_json::Value = serde_json::from_str(&tuned).unwrap();
    assert_eq!(v["mode"], "adapter");

    let eval = run(&[
        "eval",
        "--model",
        &p("ada/model.ckpt"),
        "--data",
        &p("target"),
        "--out",
        &p("ev"),
    ]);
    let v: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert_eq!(v["split"], "test");
    let f1 = v["report"]["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    assert!(root.join("ev/eval.json").is_file());

    // A backbone of another width is refused as a data error.
    let mut other = PipelineConfig::desk();
    other.model.d = 32;
    other.embedder.dim = 32;
    other.model.ffn_dim = 64;
    other.model.adapter_dim = 4;
    let other_path = root.join("other.json");
    std::fs::write(&other_path, serde_json::to_string(&other).unwrap()).unwrap();
    let out = logxfer(&[
        "--config",
        other_path.to_str().unwrap(),
        "tune",
        "--mode",
        "finetune",
        "--from",
        &p("pre/model.ckpt"),
        "--data",
        &p("target"),
        "--out",
        &p("bad"),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn transfer_experiment_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut outs = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = logxfer(&[
            "--config",
            &cfg,
            "experiment",
            "transfer",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("adapter"));
        outs.push(out_dir);
    }
    for sub in ["pretrain", "scratch", "finetune", "adapter"] {
        let read = |d: &Path| std::fs::read(d.join(sub).join("metrics.jsonl")).unwrap();
        assert_eq!(read(&outs[0]), read(&outs[1]), "{sub}/metrics.jsonl differs");
        let ck = |d: &Path| std::fs::read(d.join(sub).join("model.ckpt")).unwrap();
        assert_eq!(ck(&outs[0]), ck(&outs[1]), "{sub}/model.ckpt differs");
    }
    let report = std::fs::read_to_string(outs[0].join("report.json")).unwrap();
    assert!(report.contains("adapter_param_ratio"));
}
