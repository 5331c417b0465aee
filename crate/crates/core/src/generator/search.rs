//! Model-agnostic greedy and beam search.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::text::{TokenId, BOS, EOS};

/// One decoding step's output.
#[derive(Debug, Clone)]
pub struct StepOutput<S> {
    /// Log-probabilities over the whole vocabulary.
    pub log_probs: Vec<f64>,
    /// Attention over memory rows (may be empty for models without one).
    pub attention: Vec<f64>,
    pub state: S,
}

/// Anything that can extend a prefix one token at a time.
pub trait StepModel {
    type State: Clone;

    fn start(&self) -> Result<Self::State>;

    /// Consumes `prev` (the last token of the prefix) and scores the next one.
    fn step(&self, state: &Self::State, prev: TokenId) -> Result<StepOutput<Self::State>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// `BOS …` ending with `EOS` unless `max_len` was reached first.
    pub tokens: Vec<TokenId>,
    /// Log-probability of each generated token (`tokens[1..]`).
    pub log_probs: Vec<f64>,
    /// Attention row recorded when generating each token.
    pub attention: Vec<Vec<f64>>,
}

impl DecodeResult {
    pub fn generated(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    /// `Σ log p / len^α` with `len` counting generated tokens.
    pub fn normalized_score(&self, alpha: f64) -> f64 {
        normalized(self.total_log_prob(), self.generated(), alpha)
    }

    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

pub fn normalized(sum: f64, len: usize, alpha: f64) -> f64 {
    sum / (len.max(1) as f64).powf(alpha)
}

pub const DEFAULT_ALPHA: f64 = 0.7;

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len < 2 {
        return Err(Error::Config(format!(
            "max_len {max_len} leaves no room to generate"
        )));
    }
    Ok(())
}

/// Argmax index, ties going to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `max_len` bounds the whole sequence including `BOS`.
pub fn greedy_decode<M: StepModel>(model: &M, max_len: usize) -> Result<DecodeResult> {
    check_max_len(max_len)?;
    let mut state = model.start()?;
    let mut out = DecodeResult {
        tokens: vec![BOS],
        log_probs: Vec::new(),
        attention: Vec::new(),
    };
    while out.tokens.len() < max_len {
        let prev = *out.tokens.last().expect("non-empty");
        let step = model.step(&state, prev)?;
        let next = argmax(&step.log_probs);
        out.tokens.push(next);
        out.log_probs.push(step.log_probs[next]);
        out.attention.push(step.attention);
        state = step.state;
        if next == EOS {
            break;
        }
    }
    Ok(out)
}

#[derive(Clone)]
struct Hyp<S> {
    result: DecodeResult,
    sum: f64,
    state: S,
}

/// Best first by score, then lexicographically smaller token sequence.
fn rank(a: (f64, &[TokenId]), b: (f64, &[TokenId])) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.cmp(b.1))
}

/// Length-normalized beam search. Every step expands all live hypotheses,
/// keeps the `beam_width` best continuations by cumulative log-probability
/// and retires those ending in `EOS`. The answer is the retired hypothesis
/// with the best normalized score; the greedy path is included as a
/// candidate so the result never scores below greedy decoding.
pub fn beam_decode<M: StepModel>(
    model: &M,
    beam_width: usize,
    max_len: usize,
    alpha: f64,
) -> Result<DecodeResult> {
    check_max_len(max_len)?;
    if beam_width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut live = vec![Hyp {
        result: DecodeResult {
            tokens: vec![BOS],
            log_probs: Vec::new(),
            attention: Vec::new(),
        },
        sum: 0.0,
        state: model.start()?,
    }];
    let mut done: Vec<Hyp<M::State>> = Vec::new();
    for _ in 1..max_len {
        if live.is_empty() {
            break;
        }
        let mut steps = Vec::with_capacity(live.len());
        let mut cands: Vec<(f64, Vec<TokenId>, usize, TokenId)> = Vec::new();
        for (bi, h) in live.iter().enumerate() {
            let prev = *h.result.tokens.last().expect("non-empty");
            let s = model.step(&h.state, prev)?;
            for (tok, &lp) in s.log_probs.iter().enumerate() {
                let mut seq = h.result.tokens.clone();
                seq.push(tok);
                cands.push((h.sum + lp, seq, bi, tok));
            }
            steps.push(s);
        }
        cands.sort_by(|a, b| rank((a.0, &a.1), (b.0, &b.1)));
        cands.truncate(beam_width);
        let mut next = Vec::with_capacity(cands.len());
        for (sum, _, bi, tok) in cands {
            let s = &steps[bi];
            let mut result = live[bi].result.clone();
            result.tokens.push(tok);
            result.log_probs.push(s.log_probs[tok]);
            result.attention.push(s.attention.clone());
            let h = Hyp {
                result,
                sum,
                state: s.state.clone(),
            };
            if tok == EOS {
                done.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
    }
    done.extend(live);
    let mut best = done
        .into_iter()
        .map(|h| h.result)
        .min_by(|a, b| {
            rank(
                (a.normalized_score(alpha), &a.tokens),
                (b.normalized_score(alpha), &b.tokens),
            )
        })
        .expect("at least one hypothesis");
    let greedy = greedy_decode(model, max_len)?;
    if greedy.normalized_score(alpha) > best.normalized_score(alpha) {
        best = greedy;
    }
    Ok(best)
}
