//! CIDEr-D: TF-IDF n-gram cosine with clipped candidate counts and a
//! Gaussian length penalty, scaled by 10.
//!
//! Document frequency counts the pairs whose references contain an n-gram;
//! `idf = max(0, ln(N / (1 + df)))` over `N` pairs.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

use super::bleu::ngram_counts;
use super::EvalPair;

pub const SIGMA: f64 = 6.0;
pub const MAX_N: usize = 4;

type Vector<'a> = BTreeMap<&'a [String], f64>;

fn tfidf<'a>(
    tokens: &'a [String],
    n: usize,
    df: &BTreeMap<&[String], usize>,
    docs: f64,
) -> Vector<'a> {
    ngram_counts(tokens, n)
        .into_iter()
        .map(|(g, c)| {
            let d = df.get(g).copied().unwrap_or(0) as f64;
            (g, c as f64 * (docs / (1.0 + d)).ln().max(0.0))
        })
        .collect()
}

fn norm(v: &Vector) -> f64 {
    v.values().map(|x| x * x).sum::<f64>().sqrt()
}

fn similarity(h: &Vector, r: &Vector, len_h: usize, len_r: usize) -> f64 {
    let (nh, nr) = (norm(h), norm(r));
    if nh == 0.0 || nr == 0.0 {
        return 0.0;
    }
    let dot: f64 = h
        .iter()
        .filter_map(|(g, &vh)| r.get(g).map(|&vr| vh.min(vr) * vr))
        .sum();
    let delta = len_h as f64 - len_r as f64;
    dot / (nh * nr) * (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp()
}

/// Per-pair scores; the corpus score is their mean.
pub fn cider_d_scores(pairs: &[EvalPair]) -> Result<Vec<f64>> {
    if pairs.len() < 2 {
        return Err(Error::Invalid(format!(
            "CIDEr-D needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let docs = pairs.len() as f64;
    let mut scores = vec![0.0; pairs.len()];
    for n in 1..=MAX_N {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for p in pairs {
            let grams: BTreeSet<&[String]> = p
                .references
                .iter()
                .flat_map(|r| ngram_counts(r, n).into_keys())
                .collect();
            for g in grams {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (p, s) in pairs.iter().zip(scores.iter_mut()) {
            let vh = tfidf(&p.candidate, n, &df, docs);
            let sims: f64 = p
                .references
                .iter()
                .map(|r| similarity(&vh, &tfidf(r, n, &df, docs), p.candidate.len(), r.len()))
                .sum();
            *s += sims / p.references.len() as f64;
        }
    }
    Ok(scores
        .into_iter()
        .map(|s| 10.0 * s / MAX_N as f64)
        .collect())
}

pub fn cider_d(pairs: &[EvalPair]) -> Result<f64> {
    let s = cider_d_scores(pairs)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}
