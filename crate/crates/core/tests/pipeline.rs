mod common;

use fundus_core::dataset::Split;
use fundus_core::synth::SynthMode;
use fundus_core::training::{
    evaluate_checkpoint, read_train_log, train, EvalOptions, GeneratorBundle, Regime, CONFIG_FILE,
    LOG_FILE, MODEL_FILE,
};
use fundus_core::Error;

#[test]
fn training_fits_and_keeps_the_best_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synth(dir.path(), "data", 20, 4, SynthMode::Standard);
    let cfg = common::small_config(
        &manifest,
        dir.path().join("run"),
        &[("epochs", "60"), ("validate_every", "5")],
    );
    let out = train(&cfg, 2).unwrap();
    let last = out.log.last().unwrap();
    assert!(last.train_loss < 0.05, "final loss {}", last.train_loss);

    let log = read_train_log(&cfg.out_dir.join(LOG_FILE)).unwrap();
    assert_eq!(log, out.log);
    let bundle = GeneratorBundle::load(&cfg.out_dir, false).unwrap();
    let saved: f64 = bundle.meta["val_bavg"].parse().unwrap();
    for e in &log {
        if let Some(v) = e.val_bavg {
            assert!(saved >= v);
        }
    }
    assert_eq!(bundle.meta["best_epoch"], out.best_epoch.to_string());

    let opts = EvalOptions::new(Split::Train, Regime::Expert);
    let a = evaluate_checkpoint(&cfg.out_dir, &opts).unwrap();
    let b = evaluate_checkpoint(&cfg.out_dir, &opts).unwrap();
    assert_eq!(a, b);
    assert!((a.report.bleu_avg - saved).abs() < 1e-12);
}

#[test]
fn evaluation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synth(dir.path(), "data", 8, 5, SynthMode::Standard);
    let cfg = common::small_config(
        &manifest,
        dir.path().join("run"),
        &[("epochs", "2"), ("validate_every", "1")],
    );
    train(&cfg, 1).unwrap();

    let empty = evaluate_checkpoint(&cfg.out_dir, &EvalOptions::new(Split::Test, Regime::Expert));
    assert!(matches!(empty, Err(Error::Invalid(_))), "{empty:?}");
    let no_pred = evaluate_checkpoint(
        &cfg.out_dir,
        &EvalOptions::new(Split::Train, Regime::Predicted),
    );
    assert!(matches!(no_pred, Err(Error::Config(_))), "{no_pred:?}");

    // Changing the stored config invalidates the checkpoint unless forced.
    let cfg_path = cfg.out_dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).unwrap();
    std::fs::write(&cfg_path, text.replace("beam_width = 1", "beam_width = 2")).unwrap();
    assert!(matches!(
        GeneratorBundle::load(&cfg.out_dir, false),
        Err(Error::HashMismatch { .. })
    ));
    let forced = GeneratorBundle::load(&cfg.out_dir, true).unwrap();
    assert_eq!(forced.config.beam_width, 2);

    let ckpt = cfg.out_dir.join(MODEL_FILE);
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&ckpt, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(
        GeneratorBundle::load(&cfg.out_dir, true),
        Err(Error::CorruptCheckpoint { .. })
    ));
}

#[test]
fn divergent_training_names_the_batch() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synth(dir.path(), "data", 8, 6, SynthMode::Standard);
    let cfg = common::small_config(
        &manifest,
        dir.path().join("run"),
        &[("lr", "1e300"), ("grad_clip", "1e300"), ("epochs", "3")],
    );
    match train(&cfg, 1) {
        Err(Error::Training(msg)) => {
            assert!(msg.contains("epoch") && msg.contains("batch"), "{msg}");
            assert!(msg.contains("[s0"), "sample ids missing: {msg}");
        }
        other => panic!("expected a training error, got {other:?}"),
    }
}

#[test]
fn empty_validation_split_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synth(dir.path(), "data", 8, 8, SynthMode::Standard);
    let cfg = common::small_config(
        &manifest,
        dir.path().join("run"),
        &[("val_split", "val"), ("epochs", "1")],
    );
    let err = train(&cfg, 1).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err:?}");
    assert!(err.to_string().contains("val_split"));
}
