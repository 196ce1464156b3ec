//! Helpers for driving the `pnet` binary from tests.

#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn pnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pnet"))
        .args(args)
        .current_dir(dir)
        .env_remove("PNET_SEED")
        .output()
        .expect("pnet runs")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[track_caller]
pub fn ok(out: &Output) -> String {
    assert!(out.status.success(), "pnet failed: {}\n{}", stderr(out), stdout(out));
    stdout(out)
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// `lines` documents of 5 to 20 words drawn from `w0..w{words}`.
pub fn corpus(lines: usize, words: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..lines)
        .map(|_| {
            let len = rng.random_range(5..=20);
            let doc: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..words))).collect();
            doc.join(" ") + "\n"
        })
        .collect()
}

/// Copy-task pairs over the corpus words.
pub fn copy_pairs(count: usize, words: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.random_range(4..=8);
            let doc: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..words))).collect();
            let s = doc.join(" ");
            format!("{s}\t{s}\n")
        })
        .collect()
}

pub const SMALL_CONFIG: &str = r#"{
  "model": {"hidden": 32, "ffn": 64, "heads": 2, "layers_enc": 1, "layers_dec": 1, "max_len": 32, "dropout": 0.1},
  "train": {"steps": 50, "batch_size": 8, "warmup": 10, "lr": 0.001},
  "paths": {"corpus": "corpus.txt", "vocab": "vocab.txt", "checkpoint": "model.ck"}
}"#;

/// Writes a 100-line corpus, its vocabulary and [`SMALL_CONFIG`] into `dir`.
pub fn setup(dir: &Path) {
    std::fs::write(dir.join("corpus.txt"), corpus(100, 40, 0)).unwrap();
    std::fs::write(dir.join("config.json"), SMALL_CONFIG).unwrap();
    ok(&pnet(dir, &["build-vocab", "--corpus", "corpus.txt", "--output", "vocab.txt", "--size", "100"]));
}

/// [`setup`] followed by a 50-step pre-training run writing `model.ck`.
pub fn pretrained(dir: &Path) {
    setup(dir);
    ok(&pnet(dir, &["pretrain", "--config", "config.json"]));
}
