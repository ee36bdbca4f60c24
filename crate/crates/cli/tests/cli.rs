use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_topicdt");

const STAGES: [&str; 12] = [
    "gen-synthetic",
    "ingest",
    "embed",
    "topics",
    "rewards",
    "trajectories",
    "train",
    "eval",
    "attn",
    "labelgen",
    "ablate",
    "eval --all-seeds",
];

fn small_config(dir: &Path) -> PathBuf {
    let text = format!(
        r#"data_dir = "{}"
[synthetic]
sessions = 12
turns = 10
topics = 4
[stages]
n_topics = 4
[stages.sgns]
dim = 12
epochs = 2
[experiment]
split = [0.75, 0.25]
[experiment.model]
d_model = 8
n_layers = 1
context_k = 3
[experiment.opt]
steps = 8
batch_size = 8
[experiment.bc_opt]
steps = 8
[seeds]
count = 2
"#,
        dir.display()
    );
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn topicdt(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("ADT_DATA_DIR").output().unwrap()
}

fn run_ok(config: &Path, stage: &str) -> Value {
    let mut args = vec!["--config", config.to_str().unwrap()];
    args.extend(stage.split(' '));
    let out = topicdt(&args);
    assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

fn error_line(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error kind=")).collect();
    assert_eq!(lines.len(), 1, "{err}");
    lines[0].to_string()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "config.toml" {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn unknown_subcommand_prints_usage() {
    let out = topicdt(&["frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_input_is_one_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = topicdt(&["--data-dir", dir.path().to_str().unwrap(), "ingest"]);
    assert!(error_line(&out).starts_with("error kind=not_found msg="));
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[experiment]\nsplit = [0.5, 0.2]\n").unwrap();
    let out = topicdt(&["--config", bad.to_str().unwrap(), "ingest"]);
    assert!(error_line(&out).starts_with("error kind=validation"));
    std::fs::write(&bad, "jobs = \"many\"\n").unwrap();
    let out = topicdt(&["--config", bad.to_str().unwrap(), "ingest"]);
    assert!(error_line(&out).starts_with("error kind=validation"));
    let out = topicdt(&["--scale", "happiness", "ingest"]);
    assert!(!out.status.success());
}

#[test]
fn data_dir_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args(["gen-synthetic", "--sessions", "3", "--turns", "4"])
        .env("ADT_DATA_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("transcripts.jsonl").exists());
    let sidecar = std::fs::read_to_string(dir.path().join("transcripts.topics.tsv")).unwrap();
    assert_eq!(sidecar.lines().count(), 3 * 2);
}

/// Every stage in order, twice in separate directories: the output trees
/// must match byte for byte.
#[test]
fn pipeline_reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut summaries = Vec::new();
    for dir in [a.path(), b.path()] {
        let cfg = small_config(dir);
        summaries.push(STAGES.iter().map(|s| run_ok(&cfg, s)).collect::<Vec<_>>());
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.iter().map(|f| &f.0).collect::<Vec<_>>(), fb.iter().map(|f| &f.0).collect::<Vec<_>>());
    for ((p, x), (_, y)) in fa.iter().zip(&fb) {
        assert!(x == y, "{} differs between runs", p.display());
    }

    let s = &summaries[0];
    assert_eq!(s[0]["turn_pairs"], 60);
    assert_eq!(s[1]["sessions"], 12);
    assert!(s[3]["planted_agreement"].as_f64().is_some());
    assert!(a.path().join("checkpoints/full-k3.adt").exists());

    let table = std::fs::read_to_string(a.path().join("out/ablation.txt")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.split('\t').count() == 5));
    assert_eq!(rows[0], "scale\tK=5\tK=10\tK=15\tK=20");
    let jsonl = std::fs::read_to_string(a.path().join("out/ablation.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 16 * 2);

    let lg = &s[9];
    let middle = lg["sessions"][1].as_u64().unwrap();
    assert_eq!(lg["records"]["synthetic"].as_u64().unwrap(), middle * 5);
    let csv = std::fs::read_to_string(a.path().join("out/attention-full-k3.csv")).unwrap();
    assert!(csv.starts_with("mode,modality,key,normalized_score\n"));
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for s in &STAGES[..6] {
        run_ok(&cfg, s);
    }
    let c = cfg.to_str().unwrap();
    let out = topicdt(&["--config", c, "--scale", "goal", "--context-k", "2", "--seed", "9", "train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["seed"], 9);
    assert!(dir.path().join("checkpoints/goal-k2.adt").exists());

    let out = topicdt(&["--config", c, "--condition", "anxiety", "trajectories"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["condition"], "anxiety");
    assert!(v["sessions"].as_u64().unwrap() < 12);
}

#[test]
fn serve_answers_http() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for s in &STAGES[..7] {
        run_ok(&cfg, s);
    }
    let mut child = Command::new(BIN)
        .args(["--config", cfg.to_str().unwrap(), "serve", "--addr", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let v: Value = serde_json::from_str(&line).unwrap();
    let addr = v["listening"].as_str().unwrap().to_string();

    let mut s = TcpStream::connect(&addr).unwrap();
    write!(s, "GET /checkpoints HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("\"id\":\"full-k3\""), "{resp}");
}
