#![allow(dead_code)]

use std::path::Path;
use std::process::Command;

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn shd(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_shd"))
        .args(args)
        .output()
        .expect("binary runs");
    Output {
        code: out.status.code().expect("exited normally"),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

pub fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

pub const TINY_TEACHER: &str = r#"{
  "model": { "vocab": 16, "d_model": 16, "heads": 4, "layers": 2, "max_seq": 8 },
  "task": { "kind": "copy", "seq_len": 8, "train_size": 64, "val_size": 16, "seed": 3 },
  "train": { "steps": 12, "batch_size": 4, "val_every": 4, "seed": 1 }
}"#;

pub const TINY_STUDENT: &str = r#"{
  "student": { "vocab": 16, "d_model": 12, "heads": 3, "layers": 2, "max_seq": 8 },
  "train": { "steps": 8, "batch_size": 4, "val_every": 4, "alpha_every": 2, "seed": 5 }
}"#;

/// Trains the tiny teacher into `dir/teacher` and returns that path.
pub fn tiny_teacher(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("teacher.json");
    write(&cfg, TINY_TEACHER);
    let out = dir.join("teacher");
    let r = shd(&["train-teacher", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    out
}

pub fn alpha_column(csv: &str) -> Vec<f64> {
    csv.lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect()
}
