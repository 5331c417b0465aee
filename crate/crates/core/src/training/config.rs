//! Run configuration: a `key = value` text file.
//!
//! ```text
//! # comments run from `#` to the end of the line
//! schema_version = 1
//! target = generator
//! dataset = data/manifest.jsonl
//! out_dir = runs/transfuser
//! fusion = transfuser
//! hidden = 128
//! ```
//!
//! `schema_version` is mandatory and must come first. Every other key is
//! optional and falls back to the default listed in [`TrainConfig::default`];
//! unknown keys are rejected. Relative paths are resolved against the
//! directory holding the config file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::dataset::{ImageConfig, Split};
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::generator::DecoderKind;
use crate::numeric::AdamConfig;
use crate::predictor::PredictorHyper;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq)]
        pub enum $name {
            $($variant),+
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " {:?}"),
                        other
                    ))),
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self {
                    $($name::$variant => $text),+
                })
            }
        }
    };
}

string_enum!(Regime {
    Expert => "expert",
    Predicted => "predicted",
    None => "none",
});

string_enum!(KeywordEncoderKind {
    Bag => "bag",
    Contextual => "contextual",
});

string_enum!(Target {
    Generator => "generator",
    Predictor => "predictor",
});

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub target: Target,

    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    /// Trained keyword predictor directory; needed for the predicted regime.
    pub predictor: Option<PathBuf>,

    pub fusion: FusionMode,
    pub keyword_encoder: KeywordEncoderKind,
    pub reinforce: bool,
    pub decoder: DecoderKind,
    pub regime: Regime,

    pub hidden: usize,
    pub heads: usize,
    pub fuser_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub max_keyword_words: usize,
    pub dropout: f64,
    pub image_refine: bool,
    pub image_size: usize,
    pub patch: usize,
    pub channels: usize,

    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub min_count: usize,
    pub split: [f64; 3],
    pub val_split: Split,
    pub validate_every: usize,
    /// Stop as soon as validation B-avg reaches this value.
    pub target_bleu: f64,

    pub threshold: f64,
    pub fallback_k: usize,
    pub predictor_hidden: usize,

    pub beam_width: usize,
    pub alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            target: Target::Generator,
            dataset: PathBuf::from("manifest.jsonl"),
            out_dir: PathBuf::from("run"),
            predictor: None,
            fusion: FusionMode::TransFuser,
            keyword_encoder: KeywordEncoderKind::Contextual,
            reinforce: true,
            decoder: DecoderKind::MaskedAttention,
            regime: Regime::Expert,
            hidden: 128,
            heads: 4,
            fuser_heads: 1,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 256,
            max_len: 60,
            max_keyword_words: 8,
            dropout: 0.1,
            image_refine: false,
            image_size: 64,
            patch: 16,
            channels: 3,
            lr: 1e-3,
            batch_size: 8,
            epochs: 50,
            patience: 10,
            grad_clip: 5.0,
            seed: 0,
            min_count: 1,
            split: [0.8, 0.1, 0.1],
            val_split: Split::Val,
            validate_every: 1,
            target_bleu: 1.0,
            threshold: 0.5,
            fallback_k: 3,
            predictor_hidden: 64,
            beam_width: 1,
            alpha: 0.7,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

const PATH_KEYS: [&str; 3] = ["dataset", "out_dir", "predictor"];

impl TrainConfig {
    /// Sets one key from its text form. Used by both the file parser and
    /// command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "target" => self.target = v.parse()?,
            "dataset" => self.dataset = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "predictor" => self.predictor = (!v.is_empty()).then(|| PathBuf::from(v)),
            "fusion" => self.fusion = v.parse()?,
            "keyword_encoder" => self.keyword_encoder = v.parse()?,
            "reinforce" => self.reinforce = parse_bool(key, v)?,
            "decoder" => self.decoder = v.parse()?,
            "regime" => self.regime = v.parse()?,
            "hidden" => self.hidden = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "fuser_heads" => self.fuser_heads = parse_num(key, v)?,
            "encoder_layers" => self.encoder_layers = parse_num(key, v)?,
            "decoder_layers" => self.decoder_layers = parse_num(key, v)?,
            "ffn_dim" => self.ffn_dim = parse_num(key, v)?,
            "max_len" => self.max_len = parse_num(key, v)?,
            "max_keyword_words" => self.max_keyword_words = parse_num(key, v)?,
            "dropout" => self.dropout = parse_num(key, v)?,
            "image_refine" => self.image_refine = parse_bool(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "patch" => self.patch = parse_num(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "grad_clip" => self.grad_clip = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "min_count" => self.min_count = parse_num(key, v)?,
            "split" => {
                let parts: Vec<f64> = v
                    .split(',')
                    .map(|p| parse_num(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.split = parts.try_into().map_err(|_| {
                    Error::Config(format!("split: expected three fractions, got {v:?}"))
                })?;
            }
            "val_split" => self.val_split = v.parse()?,
            "validate_every" => self.validate_every = parse_num(key, v)?,
            "target_bleu" => self.target_bleu = parse_num(key, v)?,
            "threshold" => self.threshold = parse_num(key, v)?,
            "fallback_k" => self.fallback_k = parse_num(key, v)?,
            "predictor_hidden" => self.predictor_hidden = parse_num(key, v)?,
            "beam_width" => self.beam_width = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses config text. Paths are kept as written.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.display().to_string(),
            line,
            msg,
        };
        let mut cfg = TrainConfig::default();
        let mut saw_version = false;
        for (i, raw) in text.lines().enumerate() {
            // Everything from '#' on is a comment, so values cannot contain it.
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(i + 1, format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !saw_version {
                if key != "schema_version" {
                    return Err(err(i + 1, "schema_version must be the first key".into()));
                }
                let v: u32 = value
                    .parse()
                    .map_err(|_| err(i + 1, format!("bad schema_version {value:?}")))?;
                if v != CONFIG_SCHEMA_VERSION {
                    return Err(err(
                        i + 1,
                        format!("schema_version {v} (expected {CONFIG_SCHEMA_VERSION})"),
                    ));
                }
                saw_version = true;
                continue;
            }
            cfg.set(key, value).map_err(|e| err(i + 1, e.to_string()))?;
        }
        if !saw_version {
            return Err(err(1, "missing schema_version".into()));
        }
        Ok(cfg)
    }

    /// Reads a config file and resolves its relative paths against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, path)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.out_dir);
        if let Some(p) = &mut self.predictor {
            fix(p);
        }
    }

    fn render(&self, with_paths: bool) -> String {
        let mut s = format!("schema_version = {CONFIG_SCHEMA_VERSION}\n");
        let mut kv = |k: &str, v: String| {
            if with_paths || !PATH_KEYS.contains(&k) {
                let _ = writeln!(s, "{k} = {v}");
            }
        };
        let path = |p: &Path| p.display().to_string();
        kv("target", self.target.to_string());
        kv("dataset", path(&self.dataset));
        kv("out_dir", path(&self.out_dir));
        kv(
            "predictor",
            self.predictor.as_deref().map(path).unwrap_or_default(),
        );
        kv("fusion", self.fusion.to_string());
        kv("keyword_encoder", self.keyword_encoder.to_string());
        kv("reinforce", self.reinforce.to_string());
        kv("decoder", self.decoder.to_string());
        kv("regime", self.regime.to_string());
        kv("hidden", self.hidden.to_string());
        kv("heads", self.heads.to_string());
        kv("fuser_heads", self.fuser_heads.to_string());
        kv("encoder_layers", self.encoder_layers.to_string());
        kv("decoder_layers", self.decoder_layers.to_string());
        kv("ffn_dim", self.ffn_dim.to_string());
        kv("max_len", self.max_len.to_string());
        kv("max_keyword_words", self.max_keyword_words.to_string());
        kv("dropout", format!("{:?}", self.dropout));
        kv("image_refine", self.image_refine.to_string());
        kv("image_size", self.image_size.to_string());
        kv("patch", self.patch.to_string());
        kv("channels", self.channels.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("grad_clip", format!("{:?}", self.grad_clip));
        kv("seed", self.seed.to_string());
        kv("min_count", self.min_count.to_string());
        kv(
            "split",
            format!(
                "{:?},{:?},{:?}",
                self.split[0], self.split[1], self.split[2]
            ),
        );
        kv("val_split", self.val_split.to_string());
        kv("validate_every", self.validate_every.to_string());
        kv("target_bleu", format!("{:?}", self.target_bleu));
        kv("threshold", format!("{:?}", self.threshold));
        kv("fallback_k", self.fallback_k.to_string());
        kv("predictor_hidden", self.predictor_hidden.to_string());
        kv("beam_width", self.beam_width.to_string());
        kv("alpha", format!("{:?}", self.alpha));
        s
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        self.render(true)
    }

    /// SHA-256 over the canonical text without path keys, so a checkpoint
    /// directory can be moved without invalidating it.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.render(false).as_bytes()))
    }

    pub fn image_config(&self) -> ImageConfig {
        ImageConfig {
            size: self.image_size,
            patch: self.patch,
            channels: self.channels,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn predictor_hyper(&self) -> PredictorHyper {
        PredictorHyper {
            hidden: self.predictor_hidden,
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: self.adam(),
            seed: self.seed,
            threshold: self.threshold,
            fallback_k: self.fallback_k,
        }
    }

    /// Checks value ranges. Does not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.image_config().validate()?;
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "heads {} must divide hidden {}",
                self.heads, self.hidden
            ));
        }
        if self.fuser_heads == 0 || !self.hidden.is_multiple_of(self.fuser_heads) {
            return bad(format!(
                "fuser_heads {} must divide hidden {}",
                self.fuser_heads, self.hidden
            ));
        }
        if self.decoder == DecoderKind::MaskedAttention && self.decoder_layers == 0 {
            return bad("decoder_layers must be at least 1".into());
        }
        if self.keyword_encoder == KeywordEncoderKind::Contextual && self.max_keyword_words == 0 {
            return bad("max_keyword_words must be at least 1".into());
        }
        if self.max_len < 2 {
            return bad(format!(
                "max_len {} leaves no room for a token",
                self.max_len
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad(format!("grad_clip {} must be positive", self.grad_clip));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.validate_every == 0 {
            return bad("batch_size, epochs and validate_every must be positive".into());
        }
        if self.beam_width == 0 {
            return bad("beam_width must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if self.val_split == Split::Test {
            return bad("val_split must be val or train".into());
        }
        if self.regime == Regime::Predicted
            && self.target == Target::Generator
            && self.predictor.is_none()
        {
            return bad("regime predicted requires a predictor checkpoint".into());
        }
        Ok(())
    }

    /// Range checks plus existence of every input path.
    pub fn check_paths(&self) -> Result<()> {
        if !self.dataset.is_file() {
            return Err(Error::Config(format!(
                "dataset {} does not exist",
                self.dataset.display()
            )));
        }
        if self.regime == Regime::Predicted && self.target == Target::Generator {
            let p = self.predictor.as_ref().expect("validated");
            if !p.is_dir() {
                return Err(Error::Config(format!(
                    "predictor checkpoint {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_comments() {
        let cfg = TrainConfig {
            fusion: FusionMode::Average,
            split: [0.5, 0.25, 0.25],
            predictor: Some(PathBuf::from("pred")),
            ..TrainConfig::default()
        };
        let text = format!("# header\n\n{}", cfg.to_text())
            .replace("fusion = average", "fusion = average  # gate off");
        assert_eq!(TrainConfig::parse(&text, Path::new("c")).unwrap(), cfg);
    }

    #[test]
    fn schema_and_unknown_keys() {
        assert!(TrainConfig::parse("hidden = 4\n", Path::new("c")).is_err());
        assert!(TrainConfig::parse("schema_version = 2\n", Path::new("c")).is_err());
        match TrainConfig::parse("schema_version = 1\nbogus = 3\n", Path::new("c")) {
            Err(Error::Parse { line: 2, msg, .. }) => assert!(msg.contains("bogus")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(
            TrainConfig::parse("schema_version = 1\nfusion = concat\n", Path::new("c")).is_err()
        );
    }

    #[test]
    fn hash_ignores_paths_only() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.dataset = PathBuf::from("/elsewhere/m.jsonl");
        b.out_dir = PathBuf::from("/x");
        assert_eq!(a.hash(), b.hash());
        b.hidden = 64;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "schema_version = 1\ndataset = d/m.jsonl\nout_dir = /abs\n",
        )
        .unwrap();
        let cfg = TrainConfig::from_file(&path).unwrap();
        assert_eq!(cfg.dataset, dir.path().join("d/m.jsonl"));
        assert_eq!(cfg.out_dir, PathBuf::from("/abs"));
    }

    #[test]
    fn predicted_regime_needs_predictor() {
        let mut cfg = TrainConfig {
            regime: Regime::Predicted,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.predictor = Some(PathBuf::from("p"));
        cfg.validate().unwrap();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
    }
}
