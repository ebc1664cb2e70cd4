#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

/// Three domains of 4 s recordings at 8 kHz and a model small enough for a
/// full pipeline in a few seconds.
pub const TINY_CONFIG: &str = r#"
id = "tiny"
sigma_steps = 10
lambda_grid = [0.0, 1.0]

[synth]
n_domains = 3
train_files = 2
dev_files = 1
test_files = 1
file_duration = 4.0
sample_rate = 8000
noise_bank_files = 2
noise_bank_duration = 2.0

[model]
chunk_duration = 0.5
hidden_size = 8

[model.sinc]
sample_rate = 8000
filters = 4
kernel_length = 31
stride = 5
conv_layers = 1
conv_channels = 4

[train]
chunk_duration = 0.5
batch_size = 4
max_epochs = 2
steps_per_epoch = 3

[window]
duration = 0.5
step = 0.25
"#;

pub fn davad() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_davad"));
    c.env("RUST_LOG", "warn");
    c
}

/// Runs `davad` in `dir` with the given config file and arguments.
pub fn run_in(dir: &Path, config: &str, args: &[&str]) -> Output {
    davad()
        .current_dir(dir)
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

pub fn run_ok(dir: &Path, config: &str, args: &[&str]) -> String {
    let out = run_in(dir, config, args);
    assert!(
        out.status.success(),
        "davad {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A scratch directory holding `tiny.toml`.
pub fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY_CONFIG).unwrap();
    dir
}

/// SHA-256 of every file below `root`, keyed by relative path.
pub fn tree_hashes(root: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest = Sha256::digest(std::fs::read(&p).unwrap());
                let hex = digest.iter().map(|b| format!("{b:02x}")).collect();
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), hex);
            }
        }
    }
    out
}

/// Every command of the tool, in pipeline order.
pub const COMMANDS: &[&[&str]] = &[
    &["generate"],
    &["train"],
    &["tune"],
    &["apply"],
    &["evaluate"],
    &["matrix"],
    &["sweep-lambda"],
    &["confusion"],
];

/// Runs all commands in a fresh workspace and returns the stdout of each
/// and the hashes of everything written.
pub fn full_run(seed: &str) -> (Vec<String>, BTreeMap<PathBuf, String>) {
    let ws = workspace();
    let stdout = COMMANDS
        .iter()
        .map(|args| {
            let mut a = args.to_vec();
            a.extend(["--seed", seed]);
            run_ok(ws.path(), "tiny.toml", &a)
        })
        .collect();
    (stdout, tree_hashes(ws.path()))
}
