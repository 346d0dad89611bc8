#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_add"))
}

/// Runs `add` with `args`, optionally pinning `ADD_SEED`.
pub fn add(args: &[&str], seed: Option<u64>) -> Output {
    let mut cmd = Command::new(bin());
    cmd.args(args).env("RUST_LOG", "warn");
    match seed {
        Some(s) => cmd.env("ADD_SEED", s.to_string()),
        None => cmd.env_remove("ADD_SEED"),
    };
    cmd.output().expect("add binary runs")
}

/// Runs `add` and panics with its stderr on failure.
pub fn add_ok(args: &[&str], seed: Option<u64>) -> String {
    let out = add(args, seed);
    assert!(
        out.status.success(),
        "add {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

/// The desk preset shrunk to a few seconds of work.
pub fn tiny_config() -> Value {
    let mut c: Value = serde_json::from_str(&add_ok(&["preset", "desk"], None)).unwrap();
    c["data"]["source"]["spec"]["n_samples"] = json!(40);
    c["data"]["source"]["spec"]["image_size"] = json!([16, 16]);
    c["data"]["split"] = json!([0.5, 0.25, 0.25]);
    for phase in ["search", "retrain"] {
        c[phase]["batch_size"] = json!(8);
        c[phase]["network"]["input_size"] = json!([16, 16]);
        c[phase]["network"]["stem_channels"] = json!(4);
    }
    c["search"]["epochs"] = json!(1);
    c["search"]["blocks"] = json!(2);
    c["search"]["w_schedule"] = json!({"kind": "cosine", "base_lr": 0.05, "total_epochs": 1});
    c["retrain"]["epochs"] = json!(2);
    c["retrain"]["schedule"] = json!({"kind": "cosine", "base_lr": 0.01, "total_epochs": 2});
    c
}

pub fn write_json(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Runs every subcommand into `root` with a fixed seed.
pub fn run_all_commands(root: &Path, seed: u64) {
    fs::create_dir_all(root).unwrap();
    let cfg = root.join("config.json");
    write_json(&cfg, &tiny_config());
    let s = |p: &str| root.join(p).display().to_string();
    let stdout = add_ok(&["search", "--config", &s("config.json"), "--out", &s("search")], Some(seed));
    fs::write(root.join("search.stdout"), stdout).unwrap();
    add_ok(
        &["retrain", "--genotype", &s("search/genotype.json"), "--config", &s("config.json"), "--out", &s("retrain")],
        Some(seed),
    );
    let spec = json!({"n_samples": 12, "image_size": [16, 16], "style": "mouth_only", "seed": 5});
    write_json(&root.join("eval_data.json"), &spec);
    add_ok(
        &["eval", "--checkpoint", &s("retrain/checkpoint.addc"), "--data", &s("eval_data.json"), "--out", &s("eval")],
        Some(seed),
    );
    write_json(&root.join("landmarks.json"), &json!({"points": [[2.5, 1.0], [12.0, 3.0], [9.0, 13.5], [1.0, 9.0]]}));
    add_ok(&["genmask", "--landmarks", &s("landmarks.json"), "--size", "16x16", "--out", &s("mask.ppm")], Some(seed));
    add_ok(&["export-dot", "--genotype", &s("search/genotype.json"), "--out", &s("cell.dot")], Some(seed));
}

/// Compares two artifact trees, returning the names of files that differ.
pub fn differing_files(a: &Path, b: &Path) -> Vec<String> {
    let (sa, sb) = (snapshot(a), snapshot(b));
    let names = |s: &[(String, Vec<u8>)]| s.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    if names(&sa) != names(&sb) {
        return vec![format!("file sets differ: {:?} vs {:?}", names(&sa), names(&sb))];
    }
    sa.iter().zip(&sb).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.clone()).collect()
}
