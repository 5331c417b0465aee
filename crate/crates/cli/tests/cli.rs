use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use fundus_core::explain::load_trace_report;
use fundus_core::metrics::MetricReport;

fn fundus(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fundus"))
        .args(args)
        .current_dir(dir)
        .env("FUNDUS_COLOR", "never")
        .env("FUNDUS_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[rustfmt::skip]
const SMALL: &[&str] = &[
    "--set", "hidden=32", "--set", "heads=2", "--set", "ffn_dim=64", "--set", "encoder_layers=1",
    "--set", "decoder_layers=1", "--set", "dropout=0", "--set", "lr=0.005", "--set", "batch_size=4",
    "--set", "validate_every=10", "--set", "val_split=train", "--set", "split=1,0,0",
];

/// A 20-sample dataset with a trained generator and predictor, shared by
/// the tests below.
fn workspace() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        assert_eq!(
            code(&fundus(
                p,
                &["synth-data", "--out", "data", "--n", "20", "--seed", "7"]
            )),
            0
        );
        let mut gen = vec![
            "train",
            "--dataset",
            "data/manifest.jsonl",
            "--out",
            "run",
            "--epochs",
            "80",
        ];
        gen.extend_from_slice(SMALL);
        let o = fundus(p, &gen);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let mut pred = vec![
            "train",
            "--target",
            "predictor",
            "--dataset",
            "data/manifest.jsonl",
            "--out",
            "pred",
            "--epochs",
            "20",
        ];
        pred.extend_from_slice(SMALL);
        let o = fundus(p, &pred);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        dir
    })
    .path()
}

fn image(p: &Path) -> PathBuf {
    p.join("data/images/s0000.png")
}

#[test]
fn synthetic_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for out in ["a", "b"] {
        assert_eq!(
            code(&fundus(
                p,
                &["synth-data", "--out", out, "--n", "12", "--seed", "3"]
            )),
            0
        );
    }
    for f in ["manifest.jsonl", "images/s0005.png"] {
        assert_eq!(
            std::fs::read(p.join("a").join(f)).unwrap(),
            std::fs::read(p.join("b").join(f)).unwrap()
        );
    }
    let manifest = std::fs::read_to_string(p.join("a/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 13);
}

#[test]
fn evaluate_prints_row_and_writes_parsable_report() {
    let p = workspace();
    let o = fundus(
        p,
        &[
            "evaluate",
            "--checkpoint",
            "run",
            "--split",
            "train",
            "--out",
            "eval",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let header = out.lines().next().unwrap();
    for col in ["BLEU-1", "BLEU-4", "B-avg", "ROUGE-L", "CIDEr-D", "METEOR"] {
        assert!(header.contains(col), "{header}");
    }
    let row: Vec<f64> = out
        .lines()
        .nth(1)
        .unwrap()
        .split_whitespace()
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(row.len(), 8);
    assert!(row[4] >= 0.95, "B-avg {}", row[4]);

    let text = std::fs::read_to_string(p.join("eval/metrics.txt")).unwrap();
    let report = MetricReport::parse(&text).unwrap();
    assert_eq!(MetricReport::parse(&report.to_text()).unwrap(), report);
    assert!((report.bleu_avg - row[4]).abs() < 5e-5);
    let again = fundus_core::metrics::evaluate_run(
        &p.join("eval/predictions.tsv"),
        &p.join("eval/references.tsv"),
    )
    .unwrap();
    // Same scores; the aggregate means may differ in the last bit because
    // the file-based path visits samples in id order.
    for (a, b) in again.values().iter().zip(report.values()) {
        assert!((a - b).abs() < 1e-12);
    }
    let mut by_id = report.samples.clone();
    by_id.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    assert_eq!(again.samples, by_id);
}

#[test]
fn generate_with_each_conditioning_flag() {
    let p = workspace();
    let img = image(p);
    let img = img.to_str().unwrap();
    for flags in [
        &["--keywords", "right eye; hypertension"][..],
        &["--no-keywords"],
        &["--predict", "pred"],
    ] {
        let mut args = vec!["generate", "--checkpoint", "run", "--image", img];
        args.extend_from_slice(flags);
        let o = fundus(p, &args);
        assert_eq!(code(&o), 0, "{flags:?}: {}", stderr(&o));
        assert!(!stdout(&o).trim().is_empty());
    }
}

#[test]
fn conflicting_keyword_flags_are_a_usage_error() {
    let p = workspace();
    let img = image(p);
    let img = img.to_str().unwrap();
    let o = fundus(
        p,
        &[
            "generate",
            "--checkpoint",
            "run",
            "--image",
            img,
            "--keywords",
            "drusen",
            "--predict",
            "pred",
        ],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("cannot be used with"));
    let o = fundus(p, &["generate", "--checkpoint", "run", "--image", img]);
    assert_eq!(code(&o), 1);
}

#[test]
fn visualize_flag_writes_valid_trace_and_grid() {
    let p = workspace();
    let img = image(p);
    let o = fundus(
        p,
        &[
            "generate",
            "--checkpoint",
            "run",
            "--image",
            img.to_str().unwrap(),
            "--keywords",
            "right eye",
            "--visualize",
            "vis",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let traces = load_trace_report(&p.join("vis")).unwrap();
    assert_eq!(traces.len(), 1);
    traces[0].validate().unwrap();
    let grid = std::fs::read(p.join("vis/s0000.grid.bmp")).unwrap();
    assert_eq!(&grid[..2], b"BM");
}

#[test]
fn visualize_subcommand_exports_a_split() {
    let p = workspace();
    let o = fundus(
        p,
        &[
            "visualize",
            "--checkpoint",
            "run",
            "--split",
            "train",
            "--limit",
            "3",
            "--out",
            "viz",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(load_trace_report(&p.join("viz")).unwrap().len(), 3);
    assert!(p.join("viz/index.html").exists());
}

#[test]
fn predicted_regime_needs_a_predictor() {
    let p = workspace();
    let o = fundus(
        p,
        &[
            "evaluate",
            "--checkpoint",
            "run",
            "--regime",
            "predicted",
            "--split",
            "train",
        ],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--predictor"), "{}", stderr(&o));
    let o = fundus(
        p,
        &[
            "evaluate",
            "--checkpoint",
            "run",
            "--regime",
            "predicted",
            "--predictor",
            "pred",
            "--split",
            "train",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn predict_keywords_for_image_and_manifest() {
    let p = workspace();
    let img = image(p);
    let o = fundus(
        p,
        &[
            "predict-keywords",
            "--predictor",
            "pred",
            "--image",
            img.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!stdout(&o).trim().is_empty());
    let o = fundus(
        p,
        &[
            "predict-keywords",
            "--predictor",
            "pred",
            "--dataset",
            "data/manifest.jsonl",
            "--out",
            "overlay.jsonl",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(p.join("overlay.jsonl")).unwrap();
    let overlay =
        fundus_core::dataset::manifest::parse_overlay(&text, Path::new("overlay.jsonl")).unwrap();
    assert_eq!(overlay.len(), 20);
}

#[test]
fn inspect_lists_metadata_and_tensors() {
    let p = workspace();
    let o = fundus(p, &["inspect-checkpoint", "run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("kind = generator"));
    assert!(out.contains("config hash matches"));
    assert!(out.contains("parameters"));
}

#[test]
fn validation_errors_exit_one() {
    let p = workspace();
    let cases: &[&[&str]] = &[
        &["train", "--set", "no_such_key=1"],
        &["train", "--set", "hidden"],
        &["train", "--dataset", "missing.jsonl", "--out", "x"],
        &["evaluate", "--checkpoint", "run", "--split", "nope"],
        &["evaluate", "--checkpoint", "run", "--split", "test"],
        &["frobnicate"],
    ];
    for args in cases {
        let o = fundus(p, args);
        assert_eq!(code(&o), 1, "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).contains("error"), "{args:?}");
        assert!(stdout(&o).is_empty(), "{args:?}");
    }
    let o = Command::new(env!("CARGO_BIN_EXE_fundus"))
        .args(["inspect-checkpoint", "run"])
        .current_dir(p)
        .env("FUNDUS_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn runtime_failures_exit_two() {
    let p = workspace();
    let broken = p.join("broken");
    std::fs::create_dir_all(&broken).unwrap();
    for f in ["config.txt", "vocab.txt", "keywords.txt"] {
        std::fs::copy(p.join("run").join(f), broken.join(f)).unwrap();
    }
    let bytes = std::fs::read(p.join("run/model.ckpt")).unwrap();
    std::fs::write(broken.join("model.ckpt"), &bytes[..bytes.len() / 2]).unwrap();
    let o = fundus(
        p,
        &["evaluate", "--checkpoint", "broken", "--split", "train"],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    // Output directory nested under a regular file.
    std::fs::write(p.join("plain"), "x").unwrap();
    let o = fundus(p, &["synth-data", "--out", "plain/sub", "--n", "2"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}
