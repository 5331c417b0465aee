//! METEOR-lite: unigram alignment by exact match, then Porter-stem match.
//! No synonym or paraphrase tables, so scores differ from official METEOR.

use std::collections::BTreeMap;

use super::porter::stem;
use super::EvalPair;

/// Node budget for the chunk-minimizing alignment search. When exhausted
/// the best alignment found so far is used.
pub const SEARCH_BUDGET: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeteorStats {
    pub matches: usize,
    pub chunks: usize,
    pub score: f64,
}

struct Search<'a> {
    cand: &'a [String],
    refs: &'a [String],
    cstem: Vec<String>,
    rstem: Vec<String>,
    used: Vec<bool>,
    /// `(candidate, reference)` pairs chosen so far, by candidate position.
    path: Vec<(usize, usize)>,
    need_exact: usize,
    need_total: usize,
    best: Option<usize>,
    nodes: usize,
}

impl Search<'_> {
    fn run(&mut self, i: usize, exact: usize, chunks: usize) {
        self.nodes += 1;
        if self.nodes > SEARCH_BUDGET && (self.best.is_some() || self.nodes > 50 * SEARCH_BUDGET) {
            return;
        }
        if self.best.is_some_and(|b| chunks >= b) {
            return;
        }
        let left = self.cand.len() - i;
        if exact + left < self.need_exact || self.path.len() + left < self.need_total {
            return;
        }
        if i == self.cand.len() {
            if exact == self.need_exact && self.path.len() == self.need_total {
                self.best = Some(chunks);
            }
            return;
        }
        // Options: exact matches, then stem matches, nearest to the
        // continuation of the previous match first, then skipping.
        let mut opts: Vec<(usize, bool)> = Vec::new();
        for (j, r) in self.refs.iter().enumerate() {
            if self.used[j] {
                continue;
            }
            if *r == self.cand[i] {
                opts.push((j, true));
            } else if self.rstem[j] == self.cstem[i] {
                opts.push((j, false));
            }
        }
        let next = self
            .path
            .last()
            .and_then(|&(pi, pj)| (pi + 1 == i).then_some(pj + 1));
        opts.sort_by_key(|&(j, ex)| (!ex, Some(j) != next, j));
        for (j, ex) in opts {
            let extends = next == Some(j);
            self.used[j] = true;
            self.path.push((i, j));
            self.run(i + 1, exact + ex as usize, chunks + (!extends) as usize);
            self.path.pop();
            self.used[j] = false;
        }
        self.run(i + 1, exact, chunks);
    }
}

fn multiset<'a>(xs: impl Iterator<Item = &'a str>) -> BTreeMap<&'a str, usize> {
    let mut m = BTreeMap::new();
    for x in xs {
        *m.entry(x).or_insert(0) += 1;
    }
    m
}

/// Maximal staged match counts `(exact, total)`.
fn match_quotas(cand: &[String], refs: &[String]) -> (usize, usize) {
    let cc = multiset(cand.iter().map(String::as_str));
    let rc = multiset(refs.iter().map(String::as_str));
    let mut exact = 0;
    let mut left_c: BTreeMap<String, usize> = BTreeMap::new();
    let mut left_r: BTreeMap<String, usize> = BTreeMap::new();
    for (w, &c) in &cc {
        let r = rc.get(w).copied().unwrap_or(0);
        exact += c.min(r);
        *left_c.entry(stem(w)).or_insert(0) += c - c.min(r);
    }
    for (w, &r) in &rc {
        let c = cc.get(w).copied().unwrap_or(0);
        *left_r.entry(stem(w)).or_insert(0) += r - c.min(r);
    }
    let stemmed: usize = left_c
        .iter()
        .map(|(s, &c)| c.min(left_r.get(s).copied().unwrap_or(0)))
        .sum();
    (exact, exact + stemmed)
}

pub fn meteor_single(cand: &[String], refs: &[String]) -> MeteorStats {
    let (need_exact, need_total) = match_quotas(cand, refs);
    if need_total == 0 {
        return MeteorStats {
            matches: 0,
            chunks: 0,
            score: 0.0,
        };
    }
    let mut s = Search {
        cand,
        refs,
        cstem: cand.iter().map(|w| stem(w)).collect(),
        rstem: refs.iter().map(|w| stem(w)).collect(),
        used: vec![false; refs.len()],
        path: Vec::new(),
        need_exact,
        need_total,
        best: None,
        nodes: 0,
    };
    s.run(0, 0, 0);
    let m = need_total;
    let chunks = s.best.unwrap_or(m);
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / refs.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    MeteorStats {
        matches: m,
        chunks,
        score: fmean * (1.0 - penalty),
    }
}

pub fn meteor_pair(pair: &EvalPair) -> f64 {
    pair.references
        .iter()
        .map(|r| meteor_single(&pair.candidate, r).score)
        .fold(0.0, f64::max)
}

pub fn meteor_lite(pairs: &[EvalPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(meteor_pair).sum::<f64>() / pairs.len() as f64
}
