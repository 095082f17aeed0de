#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const EPOCH: &str = "1700000000";

/// The binary under test with a pinned clock and no inherited output root.
pub fn rpam(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpam"))
        .args(args)
        .current_dir(cwd)
        .env("SOURCE_DATE_EPOCH", EPOCH)
        .env_remove("RPAM_OUTPUT_ROOT")
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("binary runs")
}

pub fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = rpam(cwd, args);
    assert!(
        out.status.success(),
        "rpam {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn fails(cwd: &Path, args: &[&str]) -> String {
    let out = rpam(cwd, args);
    assert!(!out.status.success(), "rpam {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// `gen-toy` into `dir/fx`, then label its responses into `dir/fx/label`.
pub fn toy_fixture(dir: &Path, seed: u64) -> PathBuf {
    let fx = dir.join("fx");
    ok(dir, &["gen-toy", "--seed", &seed.to_string(), "--out", "fx"]);
    ok(&fx, &["label", "--log", "responses.jsonl", "--out", "label"]);
    fx
}

pub fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

pub fn write_json(path: &Path, v: &serde_json::Value) {
    fs::write(path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
}
