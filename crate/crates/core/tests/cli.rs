use std::path::Path;
use std::process::{Command, Output};

use tokuq::commands::{AblationRow, CorrectnessRow, DefaultsDump, PlotRow, TimingRow};
use tokuq::io::load_scores;
use tokuq::types::{Metric, PerturbationConfig};

fn tokuq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokuq")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tokuq(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn rows<T: serde::de::DeserializeOwned>(text: &str) -> Vec<T> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn synth(dir: &Path) {
    ok(&[
        "synth", "--out-cases", &p(dir, "cases.jsonl"), "--out-params", &p(dir, "model.bin"),
        "--out-vocab", &p(dir, "vocab.json"), "--vocab-size", "24", "--dim", "8", "--heads", "2",
        "--ffn-dim", "16", "--max-positions", "40", "--num-cases", "10", "--prompt-len", "4",
        "--response-len", "16", "--corruption", "0.5", "--sentence-len", "4",
    ]);
}

#[test]
fn config_dump_carries_the_defaults() {
    let dump: DefaultsDump = serde_json::from_str(&ok(&["config"])).unwrap();
    assert_eq!(dump.perturbation.num_samples, 20);
    assert_eq!(dump.perturbation.sigma, 0.001);
    assert_eq!(dump.perturbation.alpha, 0.0001);
    assert!(!dump.perturbation.normalize_gradient);
    assert_eq!(dump.perturbation, PerturbationConfig::default());
    assert_eq!(dump.ablation.sigma_values, vec![1e-4, 1e-3, 1e-2]);
    assert_eq!(dump.ablation.num_samples_values, vec![5, 10, 20]);
    assert_eq!(dump.ablation.alpha_values, vec![1e-5, 1e-4, 1e-3]);
    let ks: Vec<String> = dump.k_specs.iter().map(|k| k.to_string()).collect();
    assert_eq!(ks, ["3", "5", "1%"]);
}

#[test]
fn cli_score_defaults_match_the_library_defaults() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    ok(&["score", "--cases", &p(dir.path(), "cases.jsonl"), "--params", &p(dir.path(), "model.bin"),
        "--metrics", "rand_pert", "--out", &p(dir.path(), "s.jsonl")]);
    let scores = load_scores(&dir.path().join("s.jsonl")).unwrap();
    assert_eq!(scores[0].config.as_ref().unwrap(), &PerturbationConfig::default());
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let cases = p(d, "cases.jsonl");
    let params = p(d, "model.bin");
    let scores = p(d, "scores.jsonl");
    ok(&["score", "--cases", &cases, "--params", &params, "--vocab", &p(d, "vocab.json"), "--seed", "4", "--out", &scores]);
    ok(&["score", "--cases", &cases, "--params", &params, "--seed", "4", "--workers", "3", "--out", &p(d, "again.jsonl")]);
    let a: Vec<String> = load_scores(Path::new(&scores)).unwrap().iter().map(|r| r.payload_json()).collect();
    let b: Vec<String> = load_scores(&d.join("again.jsonl")).unwrap().iter().map(|r| r.payload_json()).collect();
    assert_eq!(a.len(), 50);
    assert_eq!(a, b);

    let table = ok(&["eval-detect", "--scores", &scores, "--cases", &cases, "--out", &p(d, "report.jsonl")]);
    assert!(table.contains("top3") && table.contains("top5") && table.contains("1%"));
    for m in Metric::DEFAULTS {
        assert!(table.contains(m.as_str()), "{table}");
    }
    assert!(std::fs::read_to_string(d.join("report.jsonl")).unwrap().lines().count() > 0);

    let correct: Vec<CorrectnessRow> = rows(&ok(&["eval-correct", "--scores", &scores, "--cases", &cases]));
    assert_eq!(correct.len(), 5);

    let plot: Vec<PlotRow> = rows(&ok(&["plot-data", "--scores", &scores, "--case-id", "synth-00000", "--cases", &cases, "--vocab", &p(d, "vocab.json")]));
    assert_eq!(plot.len(), 5 * 16);
    assert!(plot.iter().all(|r| r.token.starts_with('w') && (0.0..=1.0).contains(&r.value)));

    let timing: Vec<TimingRow> = rows(&ok(&["timing", "--scores", &scores]));
    assert_eq!(timing.len(), 5);
    assert!(timing.iter().all(|t| t.count == 10));

    let ablation: Vec<AblationRow> = rows(&ok(&[
        "ablate", "--cases", &cases, "--params", &params, "--sigma-values", "0.001",
        "--num-samples-values", "5", "--alpha-values", "0.0001,0.001", "--k-specs", "3",
    ]));
    assert_eq!(ablation.len(), 2 * 3);

    let consistency = ok(&["consistency", "--cases", &cases, "--case-id", "synth-00001", "--samples", &cases]);
    assert!(consistency.contains("exact_match"));
}

#[test]
fn trace_backend_refuses_perturbation_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cases.jsonl"), "{\"case_id\":\"a\",\"ids\":[0,1,2],\"query_len\":1,\"response_len\":2}\n").unwrap();
    std::fs::write(d.join("traces.jsonl"), "{\"case_id\":\"a\",\"log_probs\":[-0.5,-1.0],\"entropies\":[0.3,0.4]}\n").unwrap();
    let base = ["score", "--backend", "trace", "--traces", &p(d, "traces.jsonl"), "--cases", &p(d, "cases.jsonl")];
    let out = tokuq(&[&base[..], &["--metrics", "nll,rand_pert"]].concat());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("rand_pert") && err.contains("trace_only"), "{err}");
    let text = ok(&[&base[..], &["--metrics", "nll,entropy"]].concat());
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn selftest_passes() {
    let text = ok(&["selftest"]);
    assert!(!text.contains("FAIL"));
    assert!(text.lines().count() >= 10);
}

#[test]
fn invalid_cases_abort_unless_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let bad = d.join("bad.jsonl");
    let mut text = std::fs::read_to_string(d.join("cases.jsonl")).unwrap();
    text.push_str("{\"case_id\":\"x\",\"ids\":[0,1],\"query_len\":1,\"response_len\":3}\n");
    std::fs::write(&bad, text).unwrap();
    let args = ["score", "--cases", bad.to_str().unwrap(), "--params", &p(d, "model.bin"), "--metrics", "nll"];
    let out = tokuq(&args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(":11"));
    let out = ok(&[&args[..], &["--skip-invalid"]].concat());
    assert_eq!(out.lines().count(), 10);
}
