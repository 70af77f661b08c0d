#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_epimem")
}

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Runs the binary with a manifest file inside `dir`.
pub fn epimem(dir: &Path, args: &[&str]) -> Output {
    let manifest = dir.join("runs.jsonl");
    Command::new(bin())
        .arg("--manifest")
        .arg(&manifest)
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn write_jsonl(path: &Path, rows: &[Value]) {
    let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
    fs::write(path, text).unwrap();
}

pub fn record(id: &str, source: &str, timestamp: &str, text: &str) -> Value {
    json!({"id": id, "source": source, "timestamp": timestamp, "text": text})
}

fn sentence(tag: &str, n: usize) -> String {
    let words: Vec<String> = (0..n).map(|j| format!("{tag}w{j}")).collect();
    let mut s = words.join(" ");
    s[..1].make_ascii_uppercase();
    s.push('.');
    s
}

/// Query and memory corpora in which every query has an exact duplicate
/// from another source (the top hit, rejected as near-duplicate), a
/// same-source copy, and a related earlier story sharing its first
/// sentence (the expected context).
pub fn pipeline_corpora(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
    let mut queries = Vec::new();
    let mut memory = Vec::new();
    for i in 0..n {
        let text = format!("{} {} {}", sentence(&format!("a{i}"), 5), sentence(&format!("b{i}"), 5), sentence(&format!("c{i}"), 5));
        let related = format!("{} {} {}", sentence(&format!("a{i}"), 5), sentence(&format!("r{i}"), 5), sentence(&format!("s{i}"), 5));
        queries.push(record(&format!("q{i}"), "nyt", "2005-03-20T12:00:00Z", &text));
        memory.push(record(&format!("dup{i}"), "apw", "2005-03-20T06:00:00Z", &text));
        memory.push(record(&format!("same{i}"), "nyt", "2005-03-19T12:00:00Z", &related));
        memory.push(record(&format!("rel{i}"), "xin", "2005-03-18T12:00:00Z", &related));
    }
    let (q, m) = (dir.join("queries.jsonl"), dir.join("memory.jsonl"));
    write_jsonl(&q, &queries);
    write_jsonl(&m, &memory);
    (q, m)
}

pub fn read_jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// `exp(−Σ(prefix_lp + cont_lp) / Σwords)` per k from a scores file.
pub fn pooled_from_scores(path: &Path) -> std::collections::BTreeMap<String, f64> {
    let mut acc: std::collections::BTreeMap<String, (f64, f64)> = Default::default();
    for row in read_jsonl(path) {
        let e = acc.entry(row["k"].to_string()).or_default();
        e.0 += row["prefix_lp"].as_f64().unwrap() + row["cont_lp"].as_f64().unwrap();
        e.1 += row["words"].as_f64().unwrap();
    }
    acc.into_iter().map(|(k, (lp, w))| (k, (-lp / w).exp())).collect()
}
