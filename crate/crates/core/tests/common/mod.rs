#![allow(dead_code)]

use std::path::{Path, PathBuf};

use fundus_core::synth::{write_synth_dataset, SynthConfig, SynthMode};
use fundus_core::training::TrainConfig;

/// Writes a synthetic dataset under `dir/name` and returns the manifest path.
pub fn synth(dir: &Path, name: &str, n: usize, seed: u64, mode: SynthMode) -> PathBuf {
    let mut cfg = SynthConfig::new(n, seed);
    cfg.mode = mode;
    write_synth_dataset(&dir.join(name), &cfg).expect("synthetic dataset")
}

/// A small, fast generator configuration.
pub fn small_config(dataset: &Path, out_dir: PathBuf, overrides: &[(&str, &str)]) -> TrainConfig {
    let mut cfg = TrainConfig {
        dataset: dataset.to_path_buf(),
        out_dir,
        ..TrainConfig::default()
    };
    let base = [
        ("hidden", "32"),
        ("heads", "2"),
        ("ffn_dim", "64"),
        ("encoder_layers", "1"),
        ("decoder_layers", "1"),
        ("dropout", "0.0"),
        ("lr", "0.005"),
        ("batch_size", "4"),
        ("epochs", "300"),
        ("validate_every", "10"),
        ("val_split", "train"),
        ("split", "1,0,0"),
        ("patience", "1000"),
    ];
    for (k, v) in base.iter().chain(overrides) {
        cfg.set(k, v).expect("valid override");
    }
    cfg
}
