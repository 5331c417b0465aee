//! ROUGE-L: longest-common-subsequence F-measure.

use super::EvalPair;

pub const DEFAULT_BETA: f64 = 1.2;

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_single(candidate: &[String], reference: &[String], beta: f64) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Best score over the pair's references.
pub fn rouge_l_pair(pair: &EvalPair, beta: f64) -> f64 {
    pair.references
        .iter()
        .map(|r| rouge_l_single(&pair.candidate, r, beta))
        .fold(0.0, f64::max)
}

/// Mean over pairs; 0 for an empty corpus.
pub fn rouge_l(pairs: &[EvalPair], beta: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|p| rouge_l_pair(p, beta)).sum::<f64>() / pairs.len() as f64
}
