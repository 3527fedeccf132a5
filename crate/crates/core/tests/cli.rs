use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fbs_core::backbone::{save_checkpoint, FusionInit, Model, ModelConfig};
use fbs_core::skipgate::GatePolicyConfig;
use fbs_core::training::Config;

fn fbs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbs")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn checkpoint(dir: &Path) -> String {
    let m = Model::new(ModelConfig {
        seed: 5,
        fusion_init: FusionInit::Random,
        ..ModelConfig::tiny()
    })
    .unwrap();
    let p = dir.join("tiny.ckpt");
    save_checkpoint(&m, &p).unwrap();
    p.display().to_string()
}

/// Config whose only critical layer is the first, so gates decide freely.
fn loose_config(dir: &Path) -> String {
    let cfg = Config {
        model: ModelConfig::tiny(),
        gate: GatePolicyConfig {
            never_skip: vec![1],
            ..GatePolicyConfig::for_layers(3)
        }
        .with_tau(0.5),
        ..Config::default()
    };
    let p = dir.join("cfg.json");
    fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
    p.display().to_string()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(fbs(&[]).status.code(), Some(2));
    assert_eq!(fbs(&["bench"]).status.code(), Some(2));
    assert_eq!(fbs(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_are_structured() {
    let o = fbs(&["verify", "--ckpt", "/nonexistent/model.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error kind=io msg=\""), "{err}");
}

#[test]
fn never_skip_threshold_runs_full_compute() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let out = dir.path().join("bench");
    let o = fbs(&["bench", "--ckpt", &ckpt, "--tau-sweep", "2.0", "--prompts", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let body = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = body.lines();
    assert_eq!(lines.next(), Some("tau,skip_pct,tflops_rel,latency_ms_median,nll"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "2");
    assert_eq!(row[1].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[2].parse::<f64>().unwrap(), 1.0);
    assert!(out.join("cells_tau2.csv").exists());
}

#[test]
fn label_prefers_idioms_over_segments() {
    let dir = tempfile::tempdir().unwrap();
    let text = dir.path().join("t.txt");
    let spans = dir.path().join("s.tsv");
    let lex = dir.path().join("lex.txt");
    let out = dir.path().join("labels.tsv");
    fs::write(&text, "abcde xy").unwrap();
    fs::write(&spans, "0\t5\tsegment\n6\t8\tsegment\n").unwrap();
    fs::write(&lex, "cde\n").unwrap();
    let o = fbs(&[
        "label",
        "--text",
        text.to_str().unwrap(),
        "--spans",
        spans.to_str().unwrap(),
        "--lexicon",
        lex.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let labels: Vec<String> = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| l.split('\t').nth(1).unwrap().to_string())
        .collect();
    assert_eq!(labels.join(""), "OOBIIOBI");
    assert!(stdout(&o).contains("overridden 1"));
}

#[test]
fn verify_passes_on_an_honest_model() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let o = fbs(&["verify", "--ckpt", &ckpt, "--pairs", "5", "--prompts", "2", "--steps", "8"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("case,seed,max_dev,pass"));
}

#[test]
fn generate_dump_then_analyze_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let cfg = loose_config(dir.path());
    let prompt = dir.path().join("prompt.txt");
    fs::write(&prompt, "the quick brown fox jumps over").unwrap();
    let dump = dir.path().join("dump");
    let o = fbs(&[
        "generate",
        "--ckpt",
        &ckpt,
        "--prompt-file",
        prompt.to_str().unwrap(),
        "--gen-len",
        "48",
        "--tau",
        "0.5",
        "--config",
        &cfg,
        "--dump",
        dump.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dump.join("trace.csv").exists());
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = fbs(&["analyze", "--traces", dump.to_str().unwrap(), "--out", out.to_str().unwrap(), "--resamples", "50"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let files: Vec<String> = ["correlations.csv", "bins.csv", "odds.csv", "logistic.csv"]
            .iter()
            .map(|f| fs::read_to_string(out.join(f)).unwrap())
            .collect();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(outputs[0][0].starts_with("scope,measure,rho,ci_low,ci_high,p,q,reject,n,note"));
}
