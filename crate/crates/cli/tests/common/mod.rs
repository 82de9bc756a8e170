#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub fn bite(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bite")).args(args).output().expect("spawn bite")
}

pub fn bite_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bite")).current_dir(dir).args(args).output().expect("spawn bite")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn write_config(dir: &Path, name: &str, config: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn schema_errors(schema: &str, instance: &Value) -> Vec<String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/schemas").join(schema);
    let validator = jsonschema::validator_for(&read_json(&path)).expect("schema compiles");
    validator.iter_errors(instance).map(|e| format!("{} at {}", e, e.instance_path())).collect()
}

/// A small four-class SSVEP run that finishes in seconds.
pub fn small_config(epochs: usize) -> Value {
    serde_json::json!({
        "model": {"stft-window": 16, "temporal-kernel": 16, "f1": 4, "depth": 2, "pool": 4},
        "train": {"epochs": epochs, "batch-size": 8, "learning-rate": 0.003},
        "data": {"synth-ssvep": {
            "subjects": 2, "trials-per-class": 6, "class-freqs": [16.0, 24.0, 32.0, 40.0],
            "fs": 128.0, "samples": 128, "channels": 4
        }}
    })
}
