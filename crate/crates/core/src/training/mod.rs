//! Training runs, checkpoint directories and evaluation.
//!
//! A generator checkpoint directory holds:
//!
//! ```text
//! model.ckpt     parameters; meta carries the config hash and best metrics
//! config.txt     the run configuration (canonical form)
//! vocab.txt      report vocabulary
//! keywords.txt   keyword vocabulary
//! train.log      one key=value record per epoch
//! ```
//!
//! A predictor directory has the same layout with `predictor.ckpt`.

pub mod config;
pub mod model;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::dataset::features::load_pixels;
use crate::dataset::PixelGrid;
use crate::dataset::{
    assign_splits, batch_iter, load_image_features, load_manifest, streams, ImageConfig,
    ImageSource, ManifestRecord, Split, Splits, SCHEMA_VERSION,
};
use crate::error::{Error, Result};
use crate::explain::{extract_trace, AttentionTrace, GridGeometry};
use crate::fusion::FusedVars;
use crate::generator::{teacher_forcing_loss, DecodeResult, Search};
use crate::metrics::{evaluate_pairs, EvalPair, MetricReport};
use crate::numeric::{
    adam_step, load_checkpoint, save_checkpoint, seeded_rng, AdamState, Meta, ParamStore, Tape,
    Tensor,
};
use crate::predictor::{
    micro_f1, threshold_keywords, train_predictor, KeywordPredictor, LabeledImage,
};
use crate::text::{
    decode_ids, encode_report, tokenize, KeywordSet, KeywordVocab, TokenId, Vocabulary,
};

pub use config::{KeywordEncoderKind, Regime, Target, TrainConfig};
pub use model::ReportModel;

pub const MODEL_FILE: &str = "model.ckpt";
pub const PREDICTOR_FILE: &str = "predictor.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const KEYWORDS_FILE: &str = "keywords.txt";
pub const LOG_FILE: &str = "train.log";
/// Trace label of the memory row used when no keywords are given.
pub const NULL_KEYWORD: &str = "<no keywords>";

/// Runs `f` over `items` on up to `threads` scoped threads, keeping order.
pub fn par_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// One loaded sample: region features plus its expert annotation.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub features: Tensor,
    pub labels: Vec<String>,
    pub description: String,
}

pub fn load_samples(
    records: &[ManifestRecord],
    image: &ImageConfig,
    threads: usize,
) -> Result<Vec<LoadedSample>> {
    par_map(records, threads, |r| {
        Ok(LoadedSample {
            sample_id: r.sample_id.clone(),
            image_path: r.image_path.clone(),
            features: load_image_features(&ImageSource::from_path(&r.image_path), image)?,
            labels: r.keywords.clone(),
            description: r.description.clone(),
        })
    })
}

/// Loads the manifest named by the config and splits it.
pub fn load_split_records(cfg: &TrainConfig, dataset: &Path) -> Result<Splits<ManifestRecord>> {
    let manifest = load_manifest(dataset, SCHEMA_VERSION)?;
    if manifest.records.is_empty() {
        return Err(Error::Invalid(format!(
            "{} has no records",
            dataset.display()
        )));
    }
    assign_splits(&manifest.records, cfg.split, cfg.seed)
}

/// Early-stopping bookkeeping over validation rounds. A round improves only
/// if it beats the best score strictly; training stops once more than
/// `patience` rounds have passed without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_round: Option<usize>,
    pub rounds: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_round: None,
            rounds: 0,
        }
    }

    /// Records one validation score; returns whether it is a new best.
    pub fn observe(&mut self, score: f64) -> bool {
        let round = self.rounds;
        self.rounds += 1;
        if score > self.best {
            self.best = score;
            self.best_round = Some(round);
            true
        } else {
            false
        }
    }

    pub fn rounds_since_best(&self) -> usize {
        match self.best_round {
            Some(r) => self.rounds - 1 - r,
            None => self.rounds,
        }
    }

    pub fn should_stop(&self) -> bool {
        self.rounds_since_best() > self.patience
    }
}

/// One training-log record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub val_bavg: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_bavg: Option<f64>,
}

fn opt<T: std::fmt::Debug>(v: &Option<T>) -> String {
    v.as_ref()
        .map(|x| format!("{x:?}"))
        .unwrap_or_else(|| "-".into())
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} train_loss={:?} grad_norm={:?} val_bavg={} best_epoch={} best_val_bavg={}",
            self.epoch,
            self.train_loss,
            self.grad_norm,
            opt(&self.val_bavg),
            opt(&self.best_epoch),
            opt(&self.best_val_bavg),
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("malformed log record {line:?}"));
        let fields: BTreeMap<&str, &str> = line
            .split_whitespace()
            .map(|kv| kv.split_once('=').ok_or_else(bad))
            .collect::<Result<_>>()?;
        let get = |k: &str| fields.get(k).copied().ok_or_else(bad);
        fn num<T: std::str::FromStr>(s: &str, bad: impl Fn() -> Error) -> Result<Option<T>> {
            if s == "-" {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|_| bad())
        }
        Ok(EpochLog {
            epoch: num(get("epoch")?, bad)?.ok_or_else(bad)?,
            train_loss: num(get("train_loss")?, bad)?.ok_or_else(bad)?,
            grad_norm: num(get("grad_norm")?, bad)?.ok_or_else(bad)?,
            val_bavg: num(get("val_bavg")?, bad)?,
            best_epoch: num(get("best_epoch")?, bad)?,
            best_val_bavg: num(get("best_val_bavg")?, bad)?,
        })
    }
}

pub fn read_train_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(EpochLog::parse)
        .collect()
}

struct LogWriter {
    file: File,
    path: PathBuf,
}

impl LogWriter {
    fn create(path: &Path) -> Result<Self> {
        File::create(path).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(LogWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    fn append(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn meta_get<'a>(meta: &'a Meta, key: &str, path: &Path) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            msg: format!("meta key {key} missing"),
        })
}

fn check_hash(cfg: &TrainConfig, meta: &Meta, path: &Path, force: bool) -> Result<()> {
    let found = meta_get(meta, "config_hash", path)?;
    let expected = cfg.hash();
    if found != expected && !force {
        return Err(Error::HashMismatch {
            expected,
            found: found.to_string(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Keyword predictor runs

/// A trained keyword predictor with its keyword vocabulary.
#[derive(Debug, Clone)]
pub struct PredictorBundle {
    pub config: TrainConfig,
    pub predictor: KeywordPredictor,
    pub store: ParamStore,
    pub keywords: KeywordVocab,
    pub meta: Meta,
}

impl PredictorBundle {
    pub fn load(dir: &Path, force: bool) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config = TrainConfig::parse(&text, &cfg_path)?;
        let ckpt = dir.join(PREDICTOR_FILE);
        let (loaded, meta) = load_checkpoint(&ckpt)?;
        check_hash(&config, &meta, &ckpt, force)?;
        let keywords = KeywordVocab::load(&dir.join(KEYWORDS_FILE))?;
        let mut rng = seeded_rng(config.seed, streams::PREDICTOR_INIT);
        let mut store = ParamStore::new();
        let predictor = KeywordPredictor::new(
            &mut store,
            "predictor",
            config.image_config().region_dim(),
            config.predictor_hidden,
            keywords.num_labels(),
            &mut rng,
        )?;
        if loaded.len() != store.len() {
            return Err(Error::CorruptCheckpoint {
                path: ckpt,
                msg: format!("{} tensors, model has {}", loaded.len(), store.len()),
            });
        }
        store.load_from(&loaded)?;
        Ok(PredictorBundle {
            config,
            predictor,
            store,
            keywords,
            meta,
        })
    }

    pub fn image_config(&self) -> ImageConfig {
        self.config.image_config()
    }

    /// Predicted keyword labels for region features computed with this
    /// predictor's image settings.
    pub fn predict_features(&self, features: &Tensor) -> Result<Vec<String>> {
        let scores = self.predictor.score_features(&self.store, features)?;
        let set = threshold_keywords(&scores, self.config.threshold, self.config.fallback_k);
        Ok(set
            .ids()
            .iter()
            .map(|&id| self.keywords.label(id).to_string())
            .collect())
    }

    pub fn predict_image(&self, path: &Path) -> Result<Vec<String>> {
        let f = load_image_features(&ImageSource::from_path(path), &self.image_config())?;
        self.predict_features(&f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorOutcome {
    pub best_epoch: usize,
    pub best_f1: f64,
    pub train_losses: Vec<f64>,
}

fn labeled<'a>(xs: &'a [LoadedSample], ks: &'a [KeywordSet]) -> Vec<LabeledImage<'a>> {
    xs.iter()
        .zip(ks)
        .map(|(s, k)| LabeledImage {
            features: &s.features,
            keywords: k,
        })
        .collect()
}

/// Trains the keyword predictor named by `cfg` and writes its directory.
pub fn train_keyword_predictor(cfg: &TrainConfig, threads: usize) -> Result<PredictorOutcome> {
    cfg.validate()?;
    cfg.check_paths()?;
    let splits = load_split_records(cfg, &cfg.dataset)?;
    if splits.train.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let image = cfg.image_config();
    let train = load_samples(&splits.train, &image, threads)?;
    let val = match cfg.val_split {
        Split::Train => Vec::new(),
        _ => load_samples(&splits.val, &image, threads)?,
    };
    let labels: Vec<Vec<String>> = train.iter().map(|s| s.labels.clone()).collect();
    let keywords = KeywordVocab::build(&labels);
    let sets = |xs: &[LoadedSample]| -> Vec<KeywordSet> {
        xs.iter()
            .map(|s| keywords.set_from_labels(&s.labels))
            .collect()
    };
    let (train_sets, val_sets) = (sets(&train), sets(&val));
    let (train_items, val_items) = (labeled(&train, &train_sets), labeled(&val, &val_sets));
    let (_, store, report) = train_predictor(
        &train_items,
        &val_items,
        keywords.num_labels(),
        &cfg.predictor_hyper(),
    )?;

    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut log = LogWriter::create(&out.join(LOG_FILE))?;
    for (i, loss) in report.train_losses.iter().enumerate() {
        log.append(&format!("epoch={} train_loss={loss:?}", i + 1))?;
    }
    let mut meta = Meta::new();
    meta.insert("kind".into(), "predictor".into());
    meta.insert("config_hash".into(), cfg.hash());
    meta.insert("best_epoch".into(), (report.best_epoch + 1).to_string());
    meta.insert("best_val_micro_f1".into(), format!("{:?}", report.best_f1));
    save_checkpoint(&store, &meta, &out.join(PREDICTOR_FILE))?;
    keywords.save(&out.join(KEYWORDS_FILE))?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;
    Ok(PredictorOutcome {
        best_epoch: report.best_epoch + 1,
        best_f1: report.best_f1,
        train_losses: report.train_losses,
    })
}

/// Micro-F1 of a trained predictor on one split of its dataset.
pub fn evaluate_predictor(
    bundle: &PredictorBundle,
    dataset: &Path,
    split: Split,
    threads: usize,
) -> Result<f64> {
    let splits = load_split_records(&bundle.config, dataset)?;
    let records = splits.get(split);
    if records.is_empty() {
        return Err(Error::Invalid(format!("split {split} is empty")));
    }
    let samples = load_samples(records, &bundle.image_config(), threads)?;
    let pred = par_map(&samples, threads, |s| {
        Ok(bundle
            .keywords
            .set_from_labels(&bundle.predict_features(&s.features)?))
    })?;
    let gold: Vec<KeywordSet> = samples
        .iter()
        .map(|s| bundle.keywords.set_from_labels(&s.labels))
        .collect();
    Ok(micro_f1(&pred, &gold))
}

// ---------------------------------------------------------------------------
// Generator runs

/// A sample ready for the generator: features, conditioning keywords and
/// the encoded reference report.
#[derive(Debug, Clone)]
pub struct GenSample {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub features: Tensor,
    pub keywords: KeywordSet,
    pub report: Vec<TokenId>,
    pub description: String,
}

/// Keyword labels a sample is conditioned on under `regime`.
fn regime_labels(
    regime: Regime,
    sample: &LoadedSample,
    predictor: Option<&PredictorBundle>,
    cfg_image: &ImageConfig,
) -> Result<Vec<String>> {
    match regime {
        Regime::Expert => Ok(sample.labels.clone()),
        Regime::None => Ok(Vec::new()),
        Regime::Predicted => {
            let p = predictor.ok_or_else(|| {
                Error::Config("regime predicted requires a predictor checkpoint".into())
            })?;
            if p.image_config() == *cfg_image {
                p.predict_features(&sample.features)
            } else {
                p.predict_image(&sample.image_path)
            }
        }
    }
}

fn gen_samples(
    samples: &[LoadedSample],
    regime: Regime,
    predictor: Option<&PredictorBundle>,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    keywords: &KeywordVocab,
    threads: usize,
) -> Result<Vec<GenSample>> {
    let image = cfg.image_config();
    par_map(samples, threads, |s| {
        let labels = regime_labels(regime, s, predictor, &image)?;
        Ok(GenSample {
            sample_id: s.sample_id.clone(),
            image_path: s.image_path.clone(),
            features: s.features.clone(),
            keywords: keywords.set_from_labels(&labels),
            report: encode_report(&tokenize(&s.description), vocab, cfg.max_len),
            description: s.description.clone(),
        })
    })
}

pub fn search_for(cfg: &TrainConfig) -> Search {
    if cfg.beam_width <= 1 {
        Search::Greedy
    } else {
        Search::Beam {
            width: cfg.beam_width,
            alpha: cfg.alpha,
        }
    }
}

/// Decodes every sample and scores the reports against the references.
pub fn score_samples(
    model: &ReportModel,
    store: &ParamStore,
    vocab: &Vocabulary,
    samples: &[GenSample],
    search: Search,
    max_len: usize,
    threads: usize,
) -> Result<(MetricReport, Vec<(String, String)>)> {
    if samples.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    let decoded: Vec<DecodeResult> = par_map(samples, threads, |s| {
        Ok(model
            .generate(store, &s.features, &s.keywords, search, max_len)?
            .0)
    })?;
    let mut pairs = Vec::with_capacity(samples.len());
    let mut texts = Vec::with_capacity(samples.len());
    for (s, d) in samples.iter().zip(&decoded) {
        let text = decode_ids(&d.tokens, vocab)?;
        pairs.push((
            s.sample_id.clone(),
            EvalPair::from_text(&text, &[&s.description])?,
        ));
        texts.push((s.sample_id.clone(), text));
    }
    Ok((evaluate_pairs(&pairs)?, texts))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_bavg: f64,
    pub log: Vec<EpochLog>,
}

fn annotate(e: Error, epoch: usize, batch: usize, ids: &[&str]) -> Error {
    match e {
        Error::NonFinite(m) => Error::Training(format!(
            "non-finite value ({m}) in epoch {epoch}, batch {batch} [{}]",
            ids.join(", ")
        )),
        other => other,
    }
}

/// Trains a generator and writes its checkpoint directory. The saved
/// parameters are those of the best validation round.
pub fn train(cfg: &TrainConfig, threads: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_paths()?;
    if cfg.target != Target::Generator {
        return Err(Error::Config("target is not generator".into()));
    }
    let predictor = match cfg.regime {
        Regime::Predicted => Some(PredictorBundle::load(
            cfg.predictor.as_ref().expect("validated"),
            false,
        )?),
        _ => None,
    };
    let splits = load_split_records(cfg, &cfg.dataset)?;
    if splits.train.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let val_records = splits.get(cfg.val_split);
    if val_records.is_empty() {
        return Err(Error::Config(format!(
            "validation split {} is empty; set val_split = train or adjust split",
            cfg.val_split
        )));
    }

    let image = cfg.image_config();
    let train_loaded = load_samples(&splits.train, &image, threads)?;
    let corpus: Vec<Vec<String>> = train_loaded
        .iter()
        .map(|s| tokenize(&s.description))
        .collect();
    let vocab = Vocabulary::build(&corpus, cfg.min_count)?;
    let label_sets: Vec<Vec<String>> = train_loaded.iter().map(|s| s.labels.clone()).collect();
    let keywords = KeywordVocab::build(&label_sets);

    let train_set = gen_samples(
        &train_loaded,
        cfg.regime,
        predictor.as_ref(),
        cfg,
        &vocab,
        &keywords,
        threads,
    )?;
    let val_set = match cfg.val_split {
        Split::Train => train_set.clone(),
        _ => {
            let loaded = load_samples(val_records, &image, threads)?;
            gen_samples(
                &loaded,
                cfg.regime,
                predictor.as_ref(),
                cfg,
                &vocab,
                &keywords,
                threads,
            )?
        }
    };

    let mut store = ParamStore::new();
    let mut init_rng = seeded_rng(cfg.seed, streams::INIT);
    let model = ReportModel::build(cfg, vocab.len(), &keywords, &mut store, &mut init_rng)?;
    let mut adam = AdamState::for_store(&store);
    let adam_cfg = cfg.adam();
    let mut dropout_rng = Some(seeded_rng(cfg.seed, streams::DROPOUT));

    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;
    vocab.save(&out.join(VOCAB_FILE))?;
    keywords.save(&out.join(KEYWORDS_FILE))?;
    let mut log_writer = LogWriter::create(&out.join(LOG_FILE))?;

    let hash = cfg.hash();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_epoch = 0usize;
    let mut log = Vec::new();
    let greedy_len = cfg.max_len;

    for epoch in 1..=cfg.epochs {
        let batches = batch_iter(&train_set, cfg.batch_size, cfg.seed, epoch as u64);
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let ids: Vec<&str> = batch.iter().map(|s| s.sample_id.as_str()).collect();
            let rng = dropout_rng.take().expect("rng returned after each batch");
            let mut tape = Tape::training(&store, rng);
            let step = (|| {
                let fused: Vec<FusedVars> = batch
                    .iter()
                    .map(|s| model.fuse(&mut tape, &s.features, &s.keywords))
                    .collect::<Result<_>>()?;
                let pairs: Vec<(&FusedVars, &[TokenId])> = fused
                    .iter()
                    .zip(batch)
                    .map(|(f, s)| (f, s.report.as_slice()))
                    .collect();
                let loss = teacher_forcing_loss(
                    &mut tape,
                    &model.decoder,
                    cfg.decoder,
                    &pairs,
                    cfg.dropout,
                )?;
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("loss {value}")));
                }
                Ok((value, tape.backward(loss)?))
            })();
            dropout_rng = tape.into_rng();
            let (value, grads) = step.map_err(|e| annotate(e, epoch, b, &ids))?;
            store.zero_grad();
            grads.accumulate_into(&mut store)?;
            norm_sum += store.clip_grad_norm(cfg.grad_clip);
            adam_step(&mut store, &mut adam, &adam_cfg).map_err(|e| annotate(e, epoch, b, &ids))?;
            loss_sum += value;
        }
        let n = batches.len() as f64;
        let mut rec = EpochLog {
            epoch,
            train_loss: loss_sum / n,
            grad_norm: norm_sum / n,
            val_bavg: None,
            best_epoch: (best_epoch > 0).then_some(best_epoch),
            best_val_bavg: (best_epoch > 0).then_some(stopper.best),
        };
        let validate = epoch % cfg.validate_every == 0 || epoch == cfg.epochs;
        let mut stop = false;
        if validate {
            let (report, _) = score_samples(
                &model,
                &store,
                &vocab,
                &val_set,
                Search::Greedy,
                greedy_len,
                threads,
            )?;
            rec.val_bavg = Some(report.bleu_avg);
            if stopper.observe(report.bleu_avg) {
                best_epoch = epoch;
                let mut meta = Meta::new();
                meta.insert("kind".into(), "generator".into());
                meta.insert("config_hash".into(), hash.clone());
                meta.insert("best_epoch".into(), epoch.to_string());
                meta.insert("val_bavg".into(), format!("{:?}", report.bleu_avg));
                meta.insert("val_rouge_l".into(), format!("{:?}", report.rouge_l));
                meta.insert("val_cider_d".into(), format!("{:?}", report.cider_d));
                meta.insert("val_meteor".into(), format!("{:?}", report.meteor));
                meta.insert("train_loss".into(), format!("{:?}", rec.train_loss));
                save_checkpoint(&store, &meta, &out.join(MODEL_FILE))?;
            }
            rec.best_epoch = Some(best_epoch);
            rec.best_val_bavg = Some(stopper.best);
            stop = stopper.should_stop() || stopper.best >= cfg.target_bleu;
        }
        log_writer.append(&rec.to_line())?;
        log.push(rec);
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        epochs_run: log.len(),
        best_epoch,
        best_val_bavg: stopper.best,
        log,
    })
}

/// A trained generator loaded from its directory.
#[derive(Debug, Clone)]
pub struct GeneratorBundle {
    pub config: TrainConfig,
    pub model: ReportModel,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub keywords: KeywordVocab,
    pub meta: Meta,
}

impl GeneratorBundle {
    /// Loads a checkpoint directory. The stored config hash must match
    /// `config.txt` unless `force` is set.
    pub fn load(dir: &Path, force: bool) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config = TrainConfig::parse(&text, &cfg_path)?;
        let ckpt = dir.join(MODEL_FILE);
        let (loaded, meta) = load_checkpoint(&ckpt)?;
        if meta_get(&meta, "kind", &ckpt)? != "generator" {
            return Err(Error::Config(format!(
                "{} is not a generator checkpoint",
                ckpt.display()
            )));
        }
        check_hash(&config, &meta, &ckpt, force)?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let keywords = KeywordVocab::load(&dir.join(KEYWORDS_FILE))?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(config.seed, streams::INIT);
        let model = ReportModel::build(&config, vocab.len(), &keywords, &mut store, &mut rng)?;
        if loaded.len() != store.len() {
            return Err(Error::CorruptCheckpoint {
                path: ckpt,
                msg: format!("{} tensors, model has {}", loaded.len(), store.len()),
            });
        }
        store.load_from(&loaded)?;
        Ok(GeneratorBundle {
            config,
            model,
            store,
            vocab,
            keywords,
            meta,
        })
    }

    pub fn image_config(&self) -> ImageConfig {
        self.config.image_config()
    }

    pub fn search(&self) -> Search {
        search_for(&self.config)
    }

    pub fn features(&self, image: &Path) -> Result<Tensor> {
        load_image_features(&ImageSource::from_path(image), &self.image_config())
    }

    /// Generates a report for one image; returns the text and the raw
    /// decode (tokens, scores, attention rows).
    pub fn generate(&self, features: &Tensor, labels: &[String]) -> Result<(String, DecodeResult)> {
        let kw = self.keywords.set_from_labels(labels);
        let (d, _) = self.model.generate(
            &self.store,
            features,
            &kw,
            self.search(),
            self.config.max_len,
        )?;
        Ok((decode_ids(&d.tokens, &self.vocab)?, d))
    }

    /// Keyword row labels of the fused memory for a conditioning set.
    pub fn memory_labels(&self, kw: &KeywordSet) -> Vec<String> {
        if kw.is_empty() {
            return vec![NULL_KEYWORD.to_string()];
        }
        kw.ids()
            .iter()
            .map(|&id| self.keywords.label(id).to_string())
            .collect()
    }

    pub fn grid(&self) -> GridGeometry {
        GridGeometry::square(
            self.config.image_size / self.config.patch,
            self.config.patch,
        )
    }

    /// Generates a report and its attention trace.
    pub fn generate_traced(
        &self,
        sample_id: &str,
        features: &Tensor,
        labels: &[String],
    ) -> Result<(String, AttentionTrace)> {
        let kw = self.keywords.set_from_labels(labels);
        let (d, _) = self.model.generate(
            &self.store,
            features,
            &kw,
            self.search(),
            self.config.max_len,
        )?;
        let trace = extract_trace(
            sample_id,
            &d,
            &self.vocab,
            &self.memory_labels(&kw),
            self.grid(),
        )?;
        Ok((decode_ids(&d.tokens, &self.vocab)?, trace))
    }

    /// The image as the model sees it, for drawing heatmaps.
    pub fn display_image(&self, path: &Path) -> Result<PixelGrid> {
        let size = self.config.image_size;
        Ok(load_pixels(path, self.config.channels)?.resize(size, size))
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub split: Split,
    pub regime: Regime,
    pub predictor: Option<PathBuf>,
    /// Overrides the dataset path stored in the checkpoint's config.
    pub dataset: Option<PathBuf>,
    pub force: bool,
    pub threads: usize,
}

impl EvalOptions {
    pub fn new(split: Split, regime: Regime) -> Self {
        EvalOptions {
            split,
            regime,
            predictor: None,
            dataset: None,
            force: false,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    /// `(sample id, generated report)` in split order.
    pub predictions: Vec<(String, String)>,
    /// `(sample id, reference report)` in split order.
    pub references: Vec<(String, String)>,
}

/// Decodes every sample of a split under a keyword regime and scores it.
pub fn evaluate_checkpoint(dir: &Path, opts: &EvalOptions) -> Result<Evaluation> {
    let predictor = match opts.regime {
        Regime::Predicted => {
            let p = opts.predictor.as_ref().ok_or_else(|| {
                Error::Config("regime predicted requires a predictor checkpoint".into())
            })?;
            Some(PredictorBundle::load(p, opts.force)?)
        }
        _ => None,
    };
    let bundle = GeneratorBundle::load(dir, opts.force)?;
    let cfg = &bundle.config;
    let dataset = opts.dataset.clone().unwrap_or_else(|| cfg.dataset.clone());
    let splits = load_split_records(cfg, &dataset)?;
    let records = splits.get(opts.split);
    if records.is_empty() {
        return Err(Error::Invalid(format!("split {} is empty", opts.split)));
    }
    let loaded = load_samples(records, &cfg.image_config(), opts.threads)?;
    let samples = gen_samples(
        &loaded,
        opts.regime,
        predictor.as_ref(),
        cfg,
        &bundle.vocab,
        &bundle.keywords,
        opts.threads,
    )?;
    let (report, predictions) = score_samples(
        &bundle.model,
        &bundle.store,
        &bundle.vocab,
        &samples,
        bundle.search(),
        cfg.max_len,
        opts.threads,
    )?;
    let references = samples
        .iter()
        .map(|s| (s.sample_id.clone(), s.description.clone()))
        .collect();
    Ok(Evaluation {
        report,
        predictions,
        references,
    })
}

/// Table row in the usual column order.
pub fn table_row(label: &str, r: &MetricReport) -> String {
    let mut s = format!("{label:<24}");
    for v in r
        .bleu
        .iter()
        .chain([&r.bleu_avg, &r.rouge_l, &r.cider_d, &r.meteor])
    {
        let _ = write!(s, " {v:>8.4}");
    }
    s
}

pub fn table_header() -> String {
    let mut s = format!("{:<24}", "run");
    for h in [
        "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "B-avg", "ROUGE-L", "CIDEr-D", "METEOR",
    ] {
        let _ = write!(s, " {h:>8}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_counts_rounds_past_best() {
        let mut s = EarlyStopping::new(2);
        assert!(s.observe(0.5));
        let mut rounds_after = 0;
        for score in [0.4, 0.3, 0.2, 0.1] {
            s.observe(score);
            rounds_after += 1;
            if s.should_stop() {
                break;
            }
        }
        assert_eq!(rounds_after, 3);
        assert_eq!(s.best_round, Some(0));
    }

    #[test]
    fn ties_do_not_reset_patience() {
        let mut s = EarlyStopping::new(0);
        s.observe(0.5);
        assert!(!s.should_stop());
        assert!(!s.observe(0.5));
        assert!(s.should_stop());
    }

    #[test]
    fn log_records_round_trip() {
        let r = EpochLog {
            epoch: 3,
            train_loss: 0.125,
            grad_norm: 2.5,
            val_bavg: Some(0.75),
            best_epoch: Some(2),
            best_val_bavg: None,
        };
        assert_eq!(EpochLog::parse(&r.to_line()).unwrap(), r);
        assert!(EpochLog::parse("epoch=x").is_err());
    }

    #[test]
    fn par_map_keeps_order_and_errors() {
        let xs: Vec<usize> = (0..17).collect();
        assert_eq!(
            par_map(&xs, 4, |&x| Ok(x * 2)).unwrap(),
            (0..17).map(|x| x * 2).collect::<Vec<_>>()
        );
        assert!(par_map(&xs, 3, |&x| if x == 9 {
            Err(Error::Invalid("x".into()))
        } else {
            Ok(x)
        })
        .is_err());
    }

    #[test]
    fn table_row_has_eight_columns() {
        let pair = |t: &str| EvalPair::from_text(t, &[t]).unwrap();
        let r = evaluate_pairs(&[
            ("s".to_string(), pair("a b c d")),
            ("t".to_string(), pair("e f g h")),
        ])
        .unwrap();
        assert_eq!(table_row("x", &r).split_whitespace().count(), 9);
        assert_eq!(table_header().split_whitespace().count(), 9);
    }
}
