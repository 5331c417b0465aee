//! Caption metrics: BLEU-1..4 and their average, ROUGE-L, CIDEr-D and
//! METEOR-lite, plus the prediction/reference file formats and the
//! metric report.
//!
//! Prediction and reference files hold one record per line,
//! `sample_id<TAB>text`, with backslash, tab, CR and LF inside fields
//! written as `\\`, `\t`, `\r` and `\n`. Blank lines are ignored. A
//! sample id repeated in a reference file adds another reference; in a
//! prediction file it is an error.

pub mod bleu;
pub mod cider;
pub mod meteor;
pub mod porter;
pub mod rouge;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::text::{escape_field, tokenize, unescape_field};

pub use bleu::{bleu_avg, bleu_corpus, Smoothing};
pub use cider::{cider_d, cider_d_scores};
pub use meteor::{meteor_lite, meteor_pair, meteor_single};
pub use rouge::{rouge_l, rouge_l_pair};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(candidate: Vec<String>, references: Vec<Vec<String>>) -> Result<Self> {
        if references.iter().all(Vec::is_empty) {
            return Err(Error::Invalid(
                "evaluation pair needs a non-empty reference".into(),
            ));
        }
        Ok(EvalPair {
            candidate,
            references,
        })
    }

    /// Tokenizes both sides.
    pub fn from_text<S: AsRef<str>>(candidate: &str, references: &[S]) -> Result<Self> {
        EvalPair::new(
            tokenize(candidate),
            references.iter().map(|r| tokenize(r.as_ref())).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleScores {
    pub sample_id: String,
    /// Sentence-level BLEU-4 with epsilon smoothing.
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub meteor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub bleu_avg: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub meteor: f64,
    pub samples: Vec<SampleScores>,
}

pub const REPORT_HEADER: &str =
    "# METEOR-lite: exact and Porter-stem unigram matching only, no synonym tables.";

/// All metrics for `(sample_id, pair)` items.
pub fn evaluate_pairs(items: &[(String, EvalPair)]) -> Result<MetricReport> {
    let pairs: Vec<EvalPair> = items.iter().map(|(_, p)| p.clone()).collect();
    let b = bleu_corpus(&pairs, 4, Smoothing::Epsilon)?;
    let bleu = [b[0], b[1], b[2], b[3]];
    let ciders = cider_d_scores(&pairs)?;
    let mut samples = Vec::with_capacity(items.len());
    for ((id, p), c) in items.iter().zip(&ciders) {
        let sb = bleu_corpus(std::slice::from_ref(p), 4, Smoothing::Epsilon)?;
        samples.push(SampleScores {
            sample_id: id.clone(),
            bleu4: sb[3],
            rouge_l: rouge_l_pair(p, rouge::DEFAULT_BETA),
            cider_d: *c,
            meteor: meteor_pair(p),
        });
    }
    let n = samples.len() as f64;
    Ok(MetricReport {
        bleu,
        bleu_avg: bleu_avg(bleu),
        rouge_l: samples.iter().map(|s| s.rouge_l).sum::<f64>() / n,
        cider_d: ciders.iter().sum::<f64>() / n,
        meteor: samples.iter().map(|s| s.meteor).sum::<f64>() / n,
        samples,
    })
}

fn parse_records(text: &str, path: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            path: path.to_string(),
            line: n + 1,
            msg: msg.to_string(),
        };
        let (id, body) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected sample_id<TAB>text"))?;
        let id = unescape_field(id).ok_or_else(|| bad("bad escape in sample id"))?;
        let body = unescape_field(body).ok_or_else(|| bad("bad escape in text"))?;
        if id.is_empty() {
            return Err(bad("empty sample id"));
        }
        out.push((id, body));
    }
    Ok(out)
}

/// `id → text`; duplicate ids are rejected.
pub fn parse_predictions(text: &str, path: &str) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    for (id, t) in parse_records(text, path)? {
        if m.insert(id.clone(), t).is_some() {
            return Err(Error::Invalid(format!(
                "{path}: duplicate prediction for {id}"
            )));
        }
    }
    Ok(m)
}

/// `id → references`, in file order.
pub fn parse_references(text: &str, path: &str) -> Result<BTreeMap<String, Vec<String>>> {
    let mut m: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (id, t) in parse_records(text, path)? {
        m.entry(id).or_default().push(t);
    }
    Ok(m)
}

pub fn format_records<'a>(items: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let mut s = String::new();
    for (id, t) in items {
        let _ = writeln!(s, "{}\t{}", escape_field(id), escape_field(t));
    }
    s
}

/// Pairs predictions with references by sample id. Order is irrelevant;
/// the id sets must be equal.
pub fn align(
    predictions: &BTreeMap<String, String>,
    references: &BTreeMap<String, Vec<String>>,
) -> Result<Vec<(String, EvalPair)>> {
    let missing: Vec<&str> = references
        .keys()
        .filter(|k| !predictions.contains_key(*k))
        .map(String::as_str)
        .collect();
    let extra: Vec<&str> = predictions
        .keys()
        .filter(|k| !references.contains_key(*k))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Alignment(format!(
            "no prediction for [{}]; no reference for [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    predictions
        .iter()
        .map(|(id, p)| {
            let pair = EvalPair::from_text(p, &references[id])
                .map_err(|e| Error::Invalid(format!("sample {id}: {e}")))?;
            Ok((id.clone(), pair))
        })
        .collect()
}

/// Scores a predictions file against a references file.
pub fn evaluate_run(predictions_file: &Path, references_file: &Path) -> Result<MetricReport> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let preds = parse_predictions(
        &read(predictions_file)?,
        &predictions_file.display().to_string(),
    )?;
    let refs = parse_references(
        &read(references_file)?,
        &references_file.display().to_string(),
    )?;
    evaluate_pairs(&align(&preds, &refs)?)
}

const KEYS: [&str; 8] = [
    "bleu1",
    "bleu2",
    "bleu3",
    "bleu4",
    "bleu_avg",
    "rouge_l",
    "cider_d",
    "meteor_lite",
];

impl MetricReport {
    pub fn values(&self) -> [f64; 8] {
        [
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3],
            self.bleu_avg,
            self.rouge_l,
            self.cider_d,
            self.meteor,
        ]
    }

    /// Human-readable table followed by a `key=value` block and the
    /// per-sample breakdown. Values in the block use the shortest
    /// representation that parses back to the same `f64`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(REPORT_HEADER);
        s.push('\n');
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>11}",
            "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "BLEU-avg", "ROUGE-L", "CIDEr-D", "METEOR-lite"
        );
        let v = self.values();
        let _ = writeln!(
            s,
            "{:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>11.4}",
            v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]
        );
        s.push_str("\n[metrics]\n");
        for (k, x) in KEYS.iter().zip(v) {
            let _ = writeln!(s, "{k}={x:?}");
        }
        let _ = writeln!(s, "samples={}", self.samples.len());
        s.push_str("\n[samples]\n");
        for p in &self.samples {
            let _ = writeln!(
                s,
                "{}\tbleu4={:?}\trouge_l={:?}\tcider_d={:?}\tmeteor_lite={:?}",
                escape_field(&p.sample_id),
                p.bleu4,
                p.rouge_l,
                p.cider_d,
                p.meteor
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<MetricReport> {
        let bad = |line: usize, msg: String| Error::Parse {
            path: "<metric report>".into(),
            line,
            msg,
        };
        let mut section = "";
        let mut kv: BTreeMap<&str, f64> = BTreeMap::new();
        let mut count = None;
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let n = n + 1;
            if line.starts_with('[') {
                section = line;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            match section {
                "[metrics]" => {
                    let (k, v) = line
                        .split_once('=')
                        .ok_or_else(|| bad(n, "expected key=value".into()))?;
                    if k == "samples" {
                        count = Some(v.parse::<usize>().map_err(|e| bad(n, e.to_string()))?);
                    } else if let Some(key) = KEYS.iter().find(|&&x| x == k) {
                        kv.insert(
                            key,
                            v.parse()
                                .map_err(|_| bad(n, format!("bad value for {k}")))?,
                        );
                    } else {
                        return Err(bad(n, format!("unknown key {k}")));
                    }
                }
                "[samples]" => {
                    let parts: Vec<&str> = line.split('\t').collect();
                    if parts.len() != 5 {
                        return Err(bad(n, "expected 5 fields".into()));
                    }
                    let field = |i: usize, key: &str| -> Result<f64> {
                        parts[i]
                            .strip_prefix(key)
                            .and_then(|v| v.strip_prefix('='))
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| bad(n, format!("bad {key} field")))
                    };
                    samples.push(SampleScores {
                        sample_id: unescape_field(parts[0])
                            .ok_or_else(|| bad(n, "bad escape".into()))?,
                        bleu4: field(1, "bleu4")?,
                        rouge_l: field(2, "rouge_l")?,
                        cider_d: field(3, "cider_d")?,
                        meteor: field(4, "meteor_lite")?,
                    });
                }
                _ => {}
            }
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| bad(0, format!("missing {k}")))
        };
        let bleu = [get("bleu1")?, get("bleu2")?, get("bleu3")?, get("bleu4")?];
        let report = MetricReport {
            bleu,
            bleu_avg: get("bleu_avg")?,
            rouge_l: get("rouge_l")?,
            cider_d: get("cider_d")?,
            meteor: get("meteor_lite")?,
            samples,
        };
        if count != Some(report.samples.len()) {
            return Err(bad(0, "sample count does not match breakdown".into()));
        }
        if report.bleu_avg != bleu_avg(bleu) {
            return Err(Error::Invalid(
                "bleu_avg is not the mean of BLEU-1..4".into(),
            ));
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn pair(c: &str, refs: &[&str]) -> EvalPair {
        EvalPair::new(toks(c), refs.iter().map(|r| toks(r)).collect()).unwrap()
    }

    #[test]
    fn bleu_hand_cases() {
        let b = bleu_corpus(
            &[pair("the cat sat", &["the cat sat on the mat"])],
            4,
            Smoothing::Epsilon,
        )
        .unwrap();
        assert!((b[0] - (-1f64).exp()).abs() < 1e-12);
        let (m, t) = bleu::clipped_matches(&toks("the the the"), &[toks("the cat")], 1);
        assert_eq!((m, t), (1, 3));
        let same = bleu_corpus(
            &[
                pair("a b c d e", &["a b c d e"]),
                pair("x y z w", &["x y z w"]),
            ],
            4,
            Smoothing::None,
        )
        .unwrap();
        assert_eq!(same, vec![1.0; 4]);
        let none = bleu_corpus(&[pair("a b", &["a c"])], 4, Smoothing::None).unwrap();
        assert_eq!(none[1], 0.0);
        assert!(bleu_corpus(&[], 4, Smoothing::Epsilon).is_err());
    }

    #[test]
    fn bleu_avg_examples() {
        assert!((bleu_avg([0.2273, 0.1650, 0.1224, 0.1017]) - 0.1541).abs() < 5e-5);
        assert!((bleu_avg([0.6877, 0.6138, 0.5421, 0.5000]) - 0.5859).abs() < 5e-5);
        assert_eq!(bleu_avg([1.0; 4]), 1.0);
    }

    #[test]
    fn rouge_hand_cases() {
        assert_eq!(rouge_l(&[pair("a b c", &["a b c"])], 1.2), 1.0);
        let f = rouge_l(&[pair("a b c d", &["a c d"])], 1.2);
        assert!((f - 2.44 * 0.75 / (1.0 + 1.44 * 0.75)).abs() < 1e-12);
        assert!((f - 0.879808).abs() < 1e-6);
        assert_eq!(rouge_l(&[pair("a b", &["c d"])], 1.2), 0.0);
        assert_eq!(
            rouge_l(&[pair("a b", &["c d", "b"])], 1.2),
            rouge::rouge_l_single(&toks("a b"), &toks("b"), 1.2)
        );
    }

    #[test]
    fn cider_ceiling_and_floor() {
        let ps = [
            pair("a b c x", &["a b c x"]),
            pair("d e f y", &["d e f y"]),
            pair("g h i z", &["g h i z"]),
        ];
        for s in cider_d_scores(&ps).unwrap() {
            assert!((s - 10.0).abs() < 1e-9);
        }
        // Sentences shorter than four tokens have no 4-grams to score.
        let ps = [
            pair("a b c", &["a b c"]),
            pair("d e f", &["d e f"]),
            pair("g h i", &["g h i"]),
        ];
        for s in cider_d_scores(&ps).unwrap() {
            assert!((s - 7.5).abs() < 1e-9);
        }
        let ps = [
            pair("a b", &["c d"]),
            pair("e f", &["g h"]),
            pair("i j", &["k l"]),
        ];
        assert_eq!(cider_d(&ps).unwrap(), 0.0);
        assert!(cider_d(&ps[..1]).is_err());
    }

    #[test]
    fn meteor_hand_cases() {
        let s = meteor_single(&toks("a b c"), &toks("a b c"));
        assert_eq!((s.matches, s.chunks), (3, 1));
        assert!((s.score - (1.0 - 0.5 / 27.0)).abs() < 1e-12);
        assert!((s.score - 0.98148).abs() < 1e-5);
        assert_eq!(
            meteor_single(&toks("cat dog"), &toks("bird fish")).score,
            0.0
        );
        let s = meteor_single(&toks("running"), &toks("run"));
        assert_eq!(s.matches, 1);
        // Exact stage wins over an equally large all-stem alignment.
        let s = meteor_single(&toks("run running"), &toks("running runs"));
        assert_eq!((s.matches, s.chunks), (2, 2));
        let s = meteor_single(&toks("b a"), &toks("a b"));
        assert_eq!(s.chunks, 2);
        // Repeated words: the chunk-minimizing alignment joins "the cat".
        let s = meteor_single(&toks("the cat the"), &toks("the the cat"));
        assert_eq!((s.matches, s.chunks), (3, 2));
    }

    #[test]
    fn files_parse_and_align() {
        let p =
            parse_predictions(&format_records([("a", "x y"), ("b\tc", "tab\there")]), "p").unwrap();
        assert_eq!(p["b\tc"], "tab\there");
        assert!(parse_predictions("a\tx\na\ty\n", "p").is_err());
        let r = parse_references("a\tx y\na\tx z\nb\\tc\tq\n", "r").unwrap();
        assert_eq!(r["a"], ["x y", "x z"]);
        assert_eq!(align(&p, &r).unwrap().len(), 2);
        let q = parse_predictions("a\tx\nzz\ty\n", "p").unwrap();
        match align(&q, &r) {
            Err(Error::Alignment(msg)) => assert!(msg.contains("zz") && msg.contains("b\tc")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_references("no tab here\n", "r"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn report_round_trips_exactly() {
        let items: Vec<(String, EvalPair)> = vec![
            (
                "s1".into(),
                pair("the disc is normal", &["the disc is normal", "normal disc"]),
            ),
            (
                "s2".into(),
                pair("small hemorrhages seen", &["hemorrhage seen in the macula"]),
            ),
            ("s3".into(), pair("drusen", &["scattered drusen present"])),
        ];
        let r = evaluate_pairs(&items).unwrap();
        assert_eq!(r.bleu_avg, bleu_avg(r.bleu));
        let parsed = MetricReport::parse(&r.to_text()).unwrap();
        assert_eq!(parsed, r);
        assert!(r.to_text().starts_with(REPORT_HEADER));
        let tampered = r.to_text().replace("bleu_avg=", "bleu_avg=0.5");
        assert!(MetricReport::parse(&tampered).is_err());
    }
}
