#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::Parser;
use tarnet::cli::{run, Cli};
use tarnet::config::RunConfig;

/// A model and corpus small enough to train in a second.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.frontend.num_mels = 16;
    c.encoder.channels = 4;
    c.encoder.hidden = 8;
    c.encoder.short = vec![1];
    c.encoder.mid = vec![2];
    c.encoder.long = vec![4];
    c.encoder.repeats = 1;
    c.encoder.fusion = 8;
    c.pooling.attention_hidden = 8;
    c.model.embedding = 8;
    c.train.lr = 0.05;
    c.train.epochs = 2;
    c.train.batch_size = 4;
    c.train.crop_seconds = 0.3;
    c.train.grad_chunk = 2;
    c.data.speakers = 3;
    c.data.utterances_per_speaker = 6;
    c.data.duration = 0.4;
    c
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

/// Runs the CLI in-process.
pub fn cli(args: &[&str]) -> tarnet::Result<()> {
    let mut full = vec!["tarnet"];
    full.extend_from_slice(args);
    run(Cli::try_parse_from(full).expect("arguments parse"))
}

/// Runs the compiled binary.
pub fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tarnet")).args(args).output().expect("binary runs")
}

/// Synthesizes the corpus described by `cfg` into `dir/corpus` and returns
/// the manifest path.
pub fn synth(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let config = write_config(dir, cfg);
    let out = dir.join("corpus");
    cli(&["--config", config.to_str().unwrap(), "synth", "--out", out.to_str().unwrap()]).unwrap();
    out.join("manifest.csv")
}
