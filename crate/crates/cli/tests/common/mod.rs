// SPDX-License-Identifier: MIT OR Apache-2.0

//! Helpers shared by the CLI integration tests and the acceptance runner.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::{json, Value};

pub fn saesteer(args: &[&str], stdin: Option<&str>) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_saesteer"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("binary runs");
    {
        let mut pipe = child.stdin.take().expect("stdin piped");
        if let Some(text) = stdin {
            pipe.write_all(text.as_bytes()).expect("stdin write");
        }
    }
    child.wait_with_output().expect("binary exits")
}

pub fn ok(out: &Output) -> Result<(), String> {
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "exit {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

/// Synthetic model, SAEs, records and PMI table written by `synth`.
pub struct Fixture {
    pub root: PathBuf,
    pub model: PathBuf,
    pub saes: Vec<PathBuf>,
    pub records: PathBuf,
    pub pmi: PathBuf,
}

pub fn synth_fixture(root: &Path, seed: u64) -> Result<Fixture, String> {
    let syn = root.join("syn");
    ok(&saesteer(
        &["synth", "--seed", &seed.to_string(), "--out", syn.to_str().unwrap()],
        None,
    ))?;
    let mut saes: Vec<PathBuf> = std::fs::read_dir(syn.join("sae"))
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .collect();
    saes.sort();
    Ok(Fixture {
        root: root.to_path_buf(),
        model: syn.join("model"),
        saes,
        records: syn.join("records.jsonl"),
        pmi: syn.join("pmi.json"),
    })
}

/// A small config over the fixture: four features per layer, three
/// prefixes, three factors.
pub fn small_config(fx: &Fixture) -> Value {
    json!({
        "model_dir": fx.model,
        "sae_dirs": fx.saes,
        "records_path": fx.records,
        "pmi_path": fx.pmi,
        "seed": 11,
        "features": {"indices": [0, 1, 2, 40]},
        "eval": {
            "prefixes": ["I think", "The weather today", "Yesterday I"],
            "factor_grid": [1.0, 5.0, 10.0],
            "max_new_tokens": 6
        },
        "steer": {"layer": 5, "feature": 0, "factor": 8.0}
    })
}

pub fn write_config(path: &Path, cfg: &Value) {
    std::fs::write(path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
}

/// Every file under `dir`, keyed by relative path.
pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.insert(p.strip_prefix(base).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub const REPL_SCRIPT: &str = "show\nlayer 5\nfeature 1\nfactor 6\nlens 3\nscore\ngen\ngen\nbase\nquit\n";

/// Runs `command` into `out`, returning standard output.
fn run_command(command: &str, config: &Path, out: &Path) -> Result<Vec<u8>, String> {
    let stdin = (command == "repl").then_some(REPL_SCRIPT);
    let o = saesteer(
        &[
            command,
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        stdin,
    );
    ok(&o)?;
    Ok(o.stdout)
}

/// Every command, in dependency order. The first run of each uses the
/// small config; the rerun reads only the emitted effective config and
/// writes elsewhere. Returns one `(command, mismatch)` per command.
pub fn rerun_all_commands(fx: &Fixture) -> Result<Vec<(String, Option<String>)>, String> {
    let cfg_path = fx.root.join("config.json");
    let mut cfg = small_config(fx);
    let first = |name: &str| fx.root.join("first").join(name);
    let commands = [
        "synth",
        "lens",
        "score-input",
        "score-output",
        "score-all",
        "steer",
        "sweep",
        "eval",
        "filter-report",
        "profile",
        "pmi",
        "repl",
    ];
    let mut report = Vec::new();
    for command in commands {
        match command {
            "filter-report" | "profile" => {
                cfg["scores_path"] = json!(first("score-all").join("scores.jsonl"));
                cfg["evals_path"] = json!(first("eval").join("evals.jsonl"));
            }
            "pmi" => cfg["generations_path"] = json!(first("eval").join("generations.jsonl")),
            _ => {}
        }
        write_config(&cfg_path, &cfg);
        let a = first(command);
        let b = fx.root.join("second").join(command);
        let stdout_a = run_command(command, &cfg_path, &a)?;
        let stdout_b = run_command(command, &a.join("effective-config.json"), &b)?;
        report.push((command.to_string(), compare_runs(&a, &b, &stdout_a, &stdout_b)));
    }
    Ok(report)
}

fn compare_runs(a: &Path, b: &Path, stdout_a: &[u8], stdout_b: &[u8]) -> Option<String> {
    let ta = tree(a);
    let tb = tree(b);
    if ta.keys().ne(tb.keys()) {
        return Some(format!("file sets differ: {:?} vs {:?}", ta.keys(), tb.keys()));
    }
    for (name, bytes) in &ta {
        if name == Path::new("effective-config.json") {
            let mut ca: Value = serde_json::from_slice(bytes).unwrap();
            let mut cb: Value = serde_json::from_slice(&tb[name]).unwrap();
            ca["output_dir"] = Value::Null;
            cb["output_dir"] = Value::Null;
            if ca != cb {
                return Some("effective configs differ beyond output_dir".into());
            }
        } else if *bytes != tb[name] {
            return Some(format!("{} differs", name.display()));
        }
    }
    if stdout_a != stdout_b {
        return Some("standard output differs".into());
    }
    None
}
