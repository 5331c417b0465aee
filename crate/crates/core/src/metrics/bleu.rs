//! Corpus BLEU with clipped n-gram precision and brevity penalty.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::EvalPair;

/// Zero-precision handling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Smoothing {
    /// Zero precisions become `EPSILON`.
    Epsilon,
    /// Any zero precision zeroes the score.
    None,
}

pub const EPSILON: f64 = 1e-9;

pub(crate) fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and total candidate n-grams for one pair.
pub fn clipped_matches(
    candidate: &[String],
    references: &[Vec<String>],
    n: usize,
) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`, shorter on ties.
pub fn closest_ref_len(c: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// BLEU-1 … BLEU-`n_max`.
pub fn bleu_corpus(pairs: &[EvalPair], n_max: usize, smoothing: Smoothing) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::Invalid("BLEU needs at least one candidate".into()));
    }
    if n_max == 0 {
        return Err(Error::Config("BLEU order must be at least 1".into()));
    }
    let mut matched = vec![0usize; n_max];
    let mut total = vec![0usize; n_max];
    let (mut c, mut r) = (0usize, 0usize);
    for p in pairs {
        c += p.candidate.len();
        r += closest_ref_len(p.candidate.len(), &p.references);
        for n in 1..=n_max {
            let (m, t) = clipped_matches(&p.candidate, &p.references, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    let bp = if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp().min(1.0)
    };
    let mut out = Vec::with_capacity(n_max);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..n_max {
        let p = if total[n] == 0 {
            0.0
        } else {
            matched[n] as f64 / total[n] as f64
        };
        let p = match (p == 0.0, smoothing) {
            (true, Smoothing::Epsilon) => EPSILON,
            (true, Smoothing::None) => {
                zero = true;
                1.0
            }
            _ => p,
        };
        log_sum += p.ln();
        out.push(if zero || bp == 0.0 {
            0.0
        } else {
            bp * (log_sum / (n + 1) as f64).exp()
        });
    }
    Ok(out)
}

/// Arithmetic mean of BLEU-1..4.
pub fn bleu_avg(scores: [f64; 4]) -> f64 {
    (scores[0] + scores[1] + scores[2] + scores[3]) / 4.0
}
