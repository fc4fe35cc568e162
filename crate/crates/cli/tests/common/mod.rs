#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

pub fn recsub(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recsub"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("failed to launch recsub")
}

/// Runs and asserts success, returning stderr.
pub fn ok(args: &[&str]) -> String {
    let out = recsub(args);
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(out.status.success(), "recsub {args:?} failed: {err}");
    err
}

/// SHA-256 of every file in `dir` except the excluded names.
pub fn hashes(dir: &Path, exclude: &[&str]) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        let name = e.file_name().to_string_lossy().into_owned();
        if exclude.contains(&name.as_str()) || !e.file_type().unwrap().is_file() {
            continue;
        }
        out.insert(name, hex::encode(Sha256::digest(fs::read(e.path()).unwrap())));
    }
    out
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small, fast pipeline settings for command tests.
pub const SMALL: &str = "seed = 7\n[sim]\nn_days = 20\n[pipeline]\nk_b = 8\n[boot_mi]\nb = 3\nm = 2\n";

pub fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

pub fn theta(v: &serde_json::Value) -> Vec<f64> {
    v["theta"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

/// Runs every command twice with identical inputs and reports, per command,
/// whether all outputs hashed identically.
pub fn reproducibility_check(root: &Path) -> Vec<(&'static str, bool)> {
    let cfg = write_config(root, "small.toml", SMALL);
    let run = |tag: &str, args: &dyn Fn(&str) -> Vec<String>, exclude: &[&str]| -> bool {
        let mut hs = Vec::new();
        for i in 0..2 {
            let out = root.join(format!("{tag}{i}"));
            let a = args(p(&out));
            let a: Vec<&str> = a.iter().map(String::as_str).collect();
            ok(&a);
            hs.push(hashes(&out, exclude));
        }
        !hs[0].is_empty() && hs[0] == hs[1]
    };
    let data = root.join("data");
    ok(&["--config", &cfg, "simulate", "--out", p(&data), "--missing-rate", "0.0"]);
    let mdata = root.join("mdata");
    ok(&["--config", &cfg, "simulate", "--out", p(&mdata), "--missing-rate", "0.2"]);
    let c = cfg.clone();
    let sim = run("sim", &|o| vec!["--config".into(), c.clone(), "simulate".into(), "--out".into(), o.into()], &[]);
    let d = p(&data).to_string();
    let fit = run(
        "fit",
        &|o| vec!["--config".into(), c.clone(), "fit".into(), "--data".into(), d.clone(), "--out".into(), o.into(), "--multilevel".into()],
        &[],
    );
    let md = p(&mdata).to_string();
    let imp = run(
        "imp",
        &|o| vec!["--config".into(), c.clone(), "fit".into(), "--data".into(), md.clone(), "--out".into(), o.into(), "--impute".into()],
        &[],
    );
    let rep = run(
        "rep",
        &|o| {
            ["--config", &c, "replicate", "--preset", "table2-sine", "--replicates", "2", "--days", "10", "--k-b", "8", "--keep-curves", "--out", o]
                .iter()
                .map(|s| s.to_string())
                .collect()
        },
        &["timing.csv"],
    );
    let t1 = run("t1", &|o| vec!["replicate".into(), "--preset".into(), "table1".into(), "--out".into(), o.into()], &[]);
    let r0 = p(&root.join("rep0")).to_string();
    let ev = run("ev", &|o| vec!["eval".into(), "--run".into(), r0.clone(), "--out".into(), o.into()], &[]);
    let diag = run(
        "diag",
        &|o| vec!["--config".into(), c.clone(), "impute-diagnose".into(), "--data".into(), md.clone(), "--out".into(), o.into()],
        &[],
    );
    vec![
        ("simulate", sim),
        ("fit", fit),
        ("fit --impute", imp),
        ("replicate", rep),
        ("replicate table1", t1),
        ("eval", ev),
        ("impute-diagnose", diag),
    ]
}
