use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fundus_core::dataset::manifest::{split_keywords, write_overlay};
use fundus_core::dataset::{load_manifest, SCHEMA_VERSION};
use fundus_core::explain::{export_trace_report, file_stem, grid_file_name, render_heatmap_grid};
use fundus_core::metrics::format_records;
use fundus_core::numeric::load_checkpoint;
use fundus_core::synth::{write_synth_dataset, SynthConfig};
use fundus_core::training::{
    evaluate_checkpoint, load_samples, load_split_records, table_header, table_row,
    train as train_generator, train_keyword_predictor, EvalOptions, GeneratorBundle,
    PredictorBundle, Regime, Target, TrainConfig, CONFIG_FILE, MODEL_FILE, PREDICTOR_FILE,
};

use crate::env::{bold, Env};
use crate::{
    EvaluateArgs, GenerateArgs, InspectArgs, PredictArgs, SynthArgs, TrainArgs, VisualizeArgs,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] fundus_core::Error),
    #[error("writing {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 for bad input or configuration, 2 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_validation() => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn must_exist(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Write {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, body).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn synth_data(a: &SynthArgs) -> Result<()> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let mut cfg = SynthConfig::new(a.n, a.seed);
    cfg.mode = a.mode;
    let manifest = write_synth_dataset(&a.out, &cfg)?;
    println!("wrote {} records to {}", a.n, manifest.display());
    Ok(())
}

/// Config file first, then the named flags, then `--set` pairs.
pub fn build_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            must_exist(p, "config")?;
            TrainConfig::from_file(p)?
        }
        None => TrainConfig::default(),
    };
    if let Some(d) = &a.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    if let Some(p) = &a.predictor {
        cfg.predictor = Some(p.clone());
    }
    if let Some(t) = &a.target {
        cfg.set("target", t)?;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    for pair in &a.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {pair:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs, env: &Env) -> Result<()> {
    let cfg = build_config(a)?;
    match cfg.target {
        Target::Predictor => {
            let out = train_keyword_predictor(&cfg, env.threads)?;
            println!(
                "predictor: best epoch {}, validation micro-F1 {:.4}; saved to {}",
                out.best_epoch,
                out.best_f1,
                cfg.out_dir.join(PREDICTOR_FILE).display()
            );
        }
        Target::Generator => {
            let out = train_generator(&cfg, env.threads)?;
            for e in &out.log {
                println!("{}", e.to_line());
            }
            println!(
                "generator: {} epochs, best epoch {}, validation B-avg {:.4}; saved to {}",
                out.epochs_run,
                out.best_epoch,
                out.best_val_bavg,
                cfg.out_dir.join(MODEL_FILE).display()
            );
        }
    }
    Ok(())
}

pub fn predict_keywords(a: &PredictArgs, env: &Env) -> Result<()> {
    must_exist(&a.predictor, "predictor directory")?;
    let bundle = PredictorBundle::load(&a.predictor, a.force)?;
    if let Some(image) = &a.image {
        must_exist(image, "image")?;
        println!("{}", bundle.predict_image(image)?.join("; "));
        return Ok(());
    }
    let dataset = a.dataset.as_ref().expect("clap requires a source");
    must_exist(dataset, "dataset")?;
    let manifest = load_manifest(dataset, SCHEMA_VERSION)?;
    let samples = load_samples(&manifest.records, &bundle.image_config(), env.threads)?;
    let mut overlay = BTreeMap::new();
    for s in &samples {
        overlay.insert(s.sample_id.clone(), bundle.predict_features(&s.features)?);
    }
    let text = write_overlay(&overlay);
    match &a.out {
        Some(p) => {
            write_file(p, &text)?;
            println!(
                "wrote predicted keywords for {} records to {}",
                overlay.len(),
                p.display()
            );
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    must_exist(&a.checkpoint, "checkpoint directory")?;
    must_exist(&a.image, "image")?;
    let bundle = GeneratorBundle::load(&a.checkpoint, a.force)?;
    let labels = if let Some(k) = &a.keywords {
        split_keywords(k)
    } else if let Some(p) = &a.predict {
        must_exist(p, "predictor directory")?;
        PredictorBundle::load(p, a.force)?.predict_image(&a.image)?
    } else {
        Vec::new()
    };
    let features = bundle.features(&a.image)?;
    let report = match &a.visualize {
        Some(dir) => {
            let id = a
                .image
                .file_stem()
                .map_or("image".into(), |s| s.to_string_lossy().into_owned());
            let (report, trace) = bundle.generate_traced(&id, &features, &labels)?;
            std::fs::create_dir_all(dir).map_err(|source| CliError::Write {
                path: dir.clone(),
                source,
            })?;
            export_trace_report(std::slice::from_ref(&trace), dir)?;
            render_heatmap_grid(
                &trace,
                &bundle.display_image(&a.image)?,
                &dir.join(grid_file_name(&id)),
            )?;
            eprintln!(
                "trace written to {}",
                dir.join(format!("{}.trace", file_stem(&id))).display()
            );
            report
        }
        None => bundle.generate(&features, &labels)?.0,
    };
    println!("{report}");
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs, env: &Env) -> Result<()> {
    must_exist(&a.checkpoint, "checkpoint directory")?;
    if a.regime == Regime::Predicted && a.predictor.is_none() {
        return Err(CliError::Usage(
            "--regime predicted requires --predictor".into(),
        ));
    }
    let opts = EvalOptions {
        split: a.split,
        regime: a.regime,
        predictor: a.predictor.clone(),
        dataset: a.dataset.clone(),
        force: a.force,
        threads: env.threads,
    };
    let e = evaluate_checkpoint(&a.checkpoint, &opts)?;
    if let Some(out) = &a.out {
        let pairs = |v: &[(String, String)]| {
            format_records(v.iter().map(|(i, t)| (i.as_str(), t.as_str())))
        };
        write_file(&out.join("metrics.txt"), &e.report.to_text())?;
        write_file(&out.join("predictions.tsv"), &pairs(&e.predictions))?;
        write_file(&out.join("references.tsv"), &pairs(&e.references))?;
    }
    let name = a
        .checkpoint
        .file_name()
        .map_or("run".into(), |n| n.to_string_lossy().into_owned());
    println!("{}", bold(&table_header(), env.color_stdout));
    println!("{}", table_row(&format!("{name}/{}", a.regime), &e.report));
    Ok(())
}

pub fn visualize(a: &VisualizeArgs, env: &Env) -> Result<()> {
    must_exist(&a.checkpoint, "checkpoint directory")?;
    if a.limit == 0 {
        return Err(CliError::Usage("--limit must be positive".into()));
    }
    let predictor = match (a.regime, &a.predictor) {
        (Regime::Predicted, None) => {
            return Err(CliError::Usage(
                "--regime predicted requires --predictor".into(),
            ))
        }
        (Regime::Predicted, Some(p)) => Some(PredictorBundle::load(p, a.force)?),
        _ => None,
    };
    let bundle = GeneratorBundle::load(&a.checkpoint, a.force)?;
    let dataset = a
        .dataset
        .clone()
        .unwrap_or_else(|| bundle.config.dataset.clone());
    let splits = load_split_records(&bundle.config, &dataset)?;
    let records = splits.get(a.split);
    if records.is_empty() {
        return Err(CliError::Usage(format!("split {} is empty", a.split)));
    }
    let records = &records[..a.limit.min(records.len())];
    std::fs::create_dir_all(&a.out).map_err(|source| CliError::Write {
        path: a.out.clone(),
        source,
    })?;
    let samples = load_samples(records, &bundle.image_config(), env.threads)?;
    let mut traces = Vec::with_capacity(samples.len());
    for s in &samples {
        let labels = match (a.regime, &predictor) {
            (Regime::Expert, _) => s.labels.clone(),
            (Regime::Predicted, Some(p)) => p.predict_image(&s.image_path)?,
            _ => Vec::new(),
        };
        let (_, trace) = bundle.generate_traced(&s.sample_id, &s.features, &labels)?;
        let grid = a.out.join(grid_file_name(&s.sample_id));
        render_heatmap_grid(&trace, &bundle.display_image(&s.image_path)?, &grid)?;
        traces.push(trace);
    }
    export_trace_report(&traces, &a.out)?;
    println!(
        "wrote {} traces to {}",
        traces.len(),
        a.out.join("index.html").display()
    );
    Ok(())
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    must_exist(&a.path, "checkpoint")?;
    let file = if a.path.is_dir() {
        [MODEL_FILE, PREDICTOR_FILE]
            .iter()
            .map(|f| a.path.join(f))
            .find(|p| p.exists())
            .ok_or_else(|| CliError::Usage(format!("no checkpoint in {}", a.path.display())))?
    } else {
        a.path.clone()
    };
    let (store, meta) = load_checkpoint(&file)?;
    println!("checkpoint {}", file.display());
    for (k, v) in &meta {
        println!("  {k} = {v}");
    }
    if let Some(dir) = file.parent() {
        let cfg_path = dir.join(CONFIG_FILE);
        if cfg_path.exists() {
            let cfg = TrainConfig::from_file(&cfg_path)?;
            let status = match meta.get("config_hash") {
                Some(h) if *h == cfg.hash() => "matches",
                Some(_) => "DIFFERS from",
                None => "not recorded for",
            };
            println!("  config hash {status} {}", cfg_path.display());
        }
    }
    let mut total = 0;
    for (name, t) in store.iter() {
        total += t.len();
        println!("  {name:<48} {:?}", t.shape());
    }
    println!("{} tensors, {total} parameters", store.len());
    Ok(())
}
