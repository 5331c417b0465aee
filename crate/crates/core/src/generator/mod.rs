//! Report decoders, the teacher-forcing objective and decoding.

pub mod masked;
pub mod recurrent;
pub mod search;

use std::fmt::Write as _;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{FusedContext, FusedVars};
use crate::numeric::kernels::log_softmax_row;
use crate::numeric::{ParamStore, Reduction, Tape, Tensor, Var};
use crate::text::{escape_field, unescape_field, TokenId, Vocabulary, EOS, PAD};

pub use masked::MaskedDecoder;
pub use recurrent::RecurrentDecoder;
pub use search::{beam_decode, greedy_decode, DecodeResult, StepModel, StepOutput, DEFAULT_ALPHA};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Recurrent,
    MaskedAttention,
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(DecoderKind::Recurrent),
            "masked_attention" => Ok(DecoderKind::MaskedAttention),
            other => Err(Error::Config(format!("unknown decoder {other:?}"))),
        }
    }
}

impl std::fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecoderKind::Recurrent => "recurrent",
            DecoderKind::MaskedAttention => "masked_attention",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderSettings {
    pub kind: DecoderKind,
    pub vocab_size: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    /// Longest sequence, `BOS` included.
    pub max_len: usize,
}

#[derive(Debug, Clone)]
pub enum Decoder {
    Recurrent(RecurrentDecoder),
    Masked(MaskedDecoder),
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        s: &DecoderSettings,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match s.kind {
            DecoderKind::Recurrent => Decoder::Recurrent(RecurrentDecoder::new(
                store,
                name,
                s.vocab_size,
                s.hidden,
                rng,
            )?),
            DecoderKind::MaskedAttention => Decoder::Masked(MaskedDecoder::new(
                store,
                name,
                s.vocab_size,
                s.hidden,
                s.heads,
                s.layers,
                s.ffn_dim,
                s.max_len,
                rng,
            )?),
        })
    }

    pub fn kind(&self) -> DecoderKind {
        match self {
            Decoder::Recurrent(_) => DecoderKind::Recurrent,
            Decoder::Masked(_) => DecoderKind::MaskedAttention,
        }
    }

    pub fn vocab_projection(&self) -> &crate::nn::Linear {
        match self {
            Decoder::Recurrent(d) => d.vocab_projection(),
            Decoder::Masked(d) => d.vocab_projection(),
        }
    }

    /// Logits `[T×V]` for input tokens, plus per-position attention rows
    /// over the memory.
    pub fn forward(
        &self,
        tape: &mut Tape,
        global: Var,
        memory: Var,
        tokens: &[TokenId],
        dropout: f64,
    ) -> Result<(Var, Tensor)> {
        match self {
            Decoder::Recurrent(d) => {
                let (logits, atts) = d.forward(tape, global, memory, tokens, dropout)?;
                let rows: Vec<Vec<f64>> = atts
                    .iter()
                    .map(|&a| tape.value(a).data().to_vec())
                    .collect();
                Ok((logits, Tensor::from_rows(&rows)?))
            }
            Decoder::Masked(d) => d.forward(tape, global, memory, tokens, dropout),
        }
    }
}

/// Splits an encoded report into decoder inputs and targets, stopping at
/// the first `EOS`. `PAD` targets are not counted.
pub fn shift_targets(report: &[TokenId]) -> (Vec<TokenId>, Vec<Option<TokenId>>) {
    let end = report
        .iter()
        .position(|&t| t == EOS)
        .unwrap_or(report.len() - 1);
    let inputs = report[..end].to_vec();
    let targets = report[1..=end]
        .iter()
        .map(|&t| (t != PAD).then_some(t))
        .collect();
    (inputs, targets)
}

/// Mean token cross-entropy over every counted target position of the
/// batch. `expected` guards against pairing a decoder with the wrong
/// configuration.
pub fn teacher_forcing_loss(
    tape: &mut Tape,
    decoder: &Decoder,
    expected: DecoderKind,
    batch: &[(&FusedVars, &[TokenId])],
    dropout: f64,
) -> Result<Var> {
    if decoder.kind() != expected {
        return Err(Error::Config(format!(
            "decoder is {} but {expected} was requested",
            decoder.kind()
        )));
    }
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for (fused, report) in batch {
        if report.len() < 2 {
            return Err(Error::Invalid(format!(
                "report of length {} has no target",
                report.len()
            )));
        }
        let (inputs, targets) = shift_targets(report);
        count += targets.iter().flatten().count();
        let (logits, _) = decoder.forward(tape, fused.global, fused.memory, &inputs, dropout)?;
        let ce = tape.cross_entropy(logits, &targets, Reduction::Sum)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    let total = total.ok_or_else(|| Error::Invalid("empty batch".into()))?;
    tape.scale(total, 1.0 / count.max(1) as f64)
}

/// Decoding against one detached fused context.
pub struct DecodeSession<'a> {
    pub decoder: &'a Decoder,
    pub store: &'a ParamStore,
    pub fused: &'a FusedContext,
}

#[derive(Debug, Clone)]
pub enum SessionState {
    Recurrent { h: Tensor, c: Tensor },
    Masked { prefix: Vec<TokenId> },
}

impl StepModel for DecodeSession<'_> {
    type State = SessionState;

    fn start(&self) -> Result<SessionState> {
        match self.decoder {
            Decoder::Recurrent(d) => {
                let mut tape = Tape::new(self.store);
                let g = tape.constant(self.fused.global.clone());
                let s = d.initial_state(&mut tape, g)?;
                Ok(SessionState::Recurrent {
                    h: tape.value(s.h).clone(),
                    c: tape.value(s.c).clone(),
                })
            }
            Decoder::Masked(_) => Ok(SessionState::Masked { prefix: Vec::new() }),
        }
    }

    fn step(&self, state: &SessionState, prev: TokenId) -> Result<StepOutput<SessionState>> {
        let mut tape = Tape::new(self.store);
        let memory = tape.constant(self.fused.memory.clone());
        match (self.decoder, state) {
            (Decoder::Recurrent(d), SessionState::Recurrent { h, c }) => {
                let h = tape.constant(h.clone());
                let c = tape.constant(c.clone());
                let s = d.step(&mut tape, memory, recurrent::LstmVars { h, c }, prev, 0.0)?;
                Ok(StepOutput {
                    log_probs: log_softmax_row(tape.value(s.logits).data()),
                    attention: tape.value(s.attention).data().to_vec(),
                    state: SessionState::Recurrent {
                        h: tape.value(s.state.h).clone(),
                        c: tape.value(s.state.c).clone(),
                    },
                })
            }
            (Decoder::Masked(d), SessionState::Masked { prefix }) => {
                let mut prefix = prefix.clone();
                prefix.push(prev);
                let global = tape.constant(self.fused.global.clone());
                let (logits, cross) = d.forward(&mut tape, global, memory, &prefix, 0.0)?;
                let last = prefix.len() - 1;
                Ok(StepOutput {
                    log_probs: log_softmax_row(tape.value(logits).row(last)),
                    attention: cross.row(last).to_vec(),
                    state: SessionState::Masked { prefix },
                })
            }
            _ => Err(Error::Invalid(
                "decoder state does not match decoder".into(),
            )),
        }
    }
}

/// Decoding strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Search {
    Greedy,
    Beam { width: usize, alpha: f64 },
}

pub fn decode(
    decoder: &Decoder,
    store: &ParamStore,
    fused: &FusedContext,
    search: Search,
    max_len: usize,
) -> Result<DecodeResult> {
    let session = DecodeSession {
        decoder,
        store,
        fused,
    };
    match search {
        Search::Greedy => greedy_decode(&session, max_len),
        Search::Beam { width, alpha } => beam_decode(&session, width, max_len, alpha),
    }
}

/// Text record of one decoded report: the sample id, the report, and for
/// every generated token the five most attended memory rows, tagged `img`
/// or `kw`.
///
/// ```text
/// sample<TAB>id
/// report<TAB>text
/// step<TAB>t<TAB>token<TAB>logprob<TAB>img:3=0.41<TAB>kw:0=0.22 …
/// end
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRecord {
    pub sample_id: String,
    pub report: String,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub token: String,
    pub log_prob: f64,
    /// `(is_image, index within its modality, weight)`, heaviest first.
    pub top: Vec<(bool, usize, f64)>,
}

pub const TOP_ATTENTION: usize = 5;

impl DecodeRecord {
    pub fn new(
        sample_id: &str,
        result: &DecodeResult,
        image_rows: usize,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let mut steps = Vec::with_capacity(result.log_probs.len());
        for (i, (lp, att)) in result.log_probs.iter().zip(&result.attention).enumerate() {
            let mut order: Vec<usize> = (0..att.len()).collect();
            order.sort_by(|&a, &b| {
                att[b]
                    .partial_cmp(&att[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let top = order
                .into_iter()
                .take(TOP_ATTENTION)
                .map(|r| {
                    if r < image_rows {
                        (true, r, att[r])
                    } else {
                        (false, r - image_rows, att[r])
                    }
                })
                .collect();
            steps.push(StepRecord {
                token: vocab.token(result.tokens[i + 1])?.to_string(),
                log_prob: *lp,
                top,
            });
        }
        Ok(DecodeRecord {
            sample_id: sample_id.to_string(),
            report: crate::text::decode_ids(&result.tokens, vocab)?,
            steps,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sample\t{}", escape_field(&self.sample_id));
        let _ = writeln!(s, "report\t{}", escape_field(&self.report));
        for (i, st) in self.steps.iter().enumerate() {
            let _ = write!(
                s,
                "step\t{i}\t{}\t{:?}",
                escape_field(&st.token),
                st.log_prob
            );
            for (img, idx, w) in &st.top {
                let _ = write!(s, "\t{}:{idx}={w:?}", if *img { "img" } else { "kw" });
            }
            s.push('\n');
        }
        s.push_str("end\n");
        s
    }

    /// Parses any number of concatenated records.
    pub fn parse_all(text: &str) -> Result<Vec<DecodeRecord>> {
        let bad = |line: usize, msg: &str| Error::Parse {
            path: "<decode records>".into(),
            line: line + 1,
            msg: msg.to_string(),
        };
        let field = |line: usize, s: &str| unescape_field(s).ok_or_else(|| bad(line, "bad escape"));
        let mut out = Vec::new();
        let mut cur: Option<DecodeRecord> = None;
        for (n, line) in text.lines().enumerate() {
            let parts: Vec<&str> = line.split('\t').collect();
            match parts[0] {
                "sample" if parts.len() == 2 && cur.is_none() => {
                    cur = Some(DecodeRecord {
                        sample_id: field(n, parts[1])?,
                        report: String::new(),
                        steps: Vec::new(),
                    })
                }
                "report" if parts.len() == 2 => {
                    cur.as_mut()
                        .ok_or_else(|| bad(n, "report outside record"))?
                        .report = field(n, parts[1])?
                }
                "step" if parts.len() >= 4 => {
                    let rec = cur.as_mut().ok_or_else(|| bad(n, "step outside record"))?;
                    if parts[1].parse::<usize>().ok() != Some(rec.steps.len()) {
                        return Err(bad(n, "steps out of order"));
                    }
                    let log_prob = parts[3]
                        .parse()
                        .map_err(|_| bad(n, "bad log-probability"))?;
                    let mut top = Vec::new();
                    for p in &parts[4..] {
                        let (tag, rest) = p
                            .split_once(':')
                            .ok_or_else(|| bad(n, "bad attention entry"))?;
                        let (idx, w) = rest
                            .split_once('=')
                            .ok_or_else(|| bad(n, "bad attention entry"))?;
                        let img = match tag {
                            "img" => true,
                            "kw" => false,
                            _ => return Err(bad(n, "attention tag must be img or kw")),
                        };
                        top.push((
                            img,
                            idx.parse().map_err(|_| bad(n, "bad attention index"))?,
                            w.parse().map_err(|_| bad(n, "bad attention weight"))?,
                        ));
                    }
                    rec.steps.push(StepRecord {
                        token: field(n, parts[2])?,
                        log_prob,
                        top,
                    });
                }
                "end" if parts.len() == 1 => {
                    out.push(cur.take().ok_or_else(|| bad(n, "end outside record"))?)
                }
                "" if parts.len() == 1 => {}
                _ => return Err(bad(n, "unrecognized line")),
            }
        }
        if cur.is_some() {
            return Err(bad(text.lines().count(), "record not terminated"));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_params;
    use crate::numeric::seeded_rng;
    use crate::text::BOS;
    use rand::Rng;

    fn settings(kind: DecoderKind) -> DecoderSettings {
        DecoderSettings {
            kind,
            vocab_size: 9,
            hidden: 8,
            heads: 2,
            layers: 2,
            ffn_dim: 16,
            max_len: 12,
        }
    }

    fn random_context(rng: &mut ChaCha8Rng, rows: usize, h: usize) -> FusedContext {
        let mut t = |r: usize| {
            Tensor::new(
                &[r, h],
                (0..r * h).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        FusedContext {
            global: t(1),
            memory: t(rows),
            image_rows: rows - 2,
            trace: Default::default(),
        }
    }

    #[test]
    fn kinds_parse() {
        assert_eq!(
            "recurrent".parse::<DecoderKind>().unwrap(),
            DecoderKind::Recurrent
        );
        assert_eq!(
            "masked_attention".parse::<DecoderKind>().unwrap(),
            DecoderKind::MaskedAttention
        );
        assert!("lstm".parse::<DecoderKind>().is_err());
    }

    #[test]
    fn targets_stop_at_eos() {
        let (i, t) = shift_targets(&[BOS, 5, 6, EOS, PAD, PAD]);
        assert_eq!(i, [BOS, 5, 6]);
        assert_eq!(t, [Some(5), Some(6), Some(EOS)]);
        let (i, t) = shift_targets(&[BOS, 5, PAD, 7]);
        assert_eq!(i, [BOS, 5, PAD]);
        assert_eq!(t, [Some(5), None, Some(7)]);
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        for kind in [DecoderKind::Recurrent, DecoderKind::MaskedAttention] {
            let mut rng = seeded_rng(1, 0);
            let mut store = ParamStore::new();
            let dec = Decoder::new(&mut store, "dec", &settings(kind), &mut rng).unwrap();
            let p = dec.vocab_projection().clone();
            zero_params(&mut store, [p.weight, p.bias]);
            let ctx = random_context(&mut rng, 5, 8);
            let mut tape = Tape::new(&store);
            let fused = FusedVars {
                global: tape.constant(ctx.global.clone()),
                memory: tape.constant(ctx.memory.clone()),
                image_rows: 3,
                trace: Default::default(),
            };
            let r1 = [BOS, 4, 5, 6, EOS, PAD];
            let r2 = [BOS, 7, EOS, PAD, PAD, PAD];
            let loss =
                teacher_forcing_loss(&mut tape, &dec, kind, &[(&fused, &r1), (&fused, &r2)], 0.0)
                    .unwrap();
            assert!((tape.value(loss).data()[0] - 9f64.ln()).abs() < 1e-12);
            let other = match kind {
                DecoderKind::Recurrent => DecoderKind::MaskedAttention,
                DecoderKind::MaskedAttention => DecoderKind::Recurrent,
            };
            assert!(teacher_forcing_loss(&mut tape, &dec, other, &[(&fused, &r1)], 0.0).is_err());
        }
    }

    #[test]
    fn masked_decoder_is_causal() {
        let mut rng = seeded_rng(2, 0);
        let mut store = ParamStore::new();
        let dec = Decoder::new(
            &mut store,
            "dec",
            &settings(DecoderKind::MaskedAttention),
            &mut rng,
        )
        .unwrap();
        let ctx = random_context(&mut rng, 6, 8);
        let run = |tokens: &[TokenId]| {
            let mut tape = Tape::new(&store);
            let g = tape.constant(ctx.global.clone());
            let m = tape.constant(ctx.memory.clone());
            let (l, _) = dec.forward(&mut tape, g, m, tokens, 0.0).unwrap();
            tape.value(l).clone()
        };
        let a = run(&[BOS, 4, 5, 6, 7]);
        let b = run(&[BOS, 4, 8, 3, 4]);
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn dominant_token_repeats_until_max_len() {
        for kind in [DecoderKind::Recurrent, DecoderKind::MaskedAttention] {
            let mut rng = seeded_rng(3, 0);
            let mut store = ParamStore::new();
            let dec = Decoder::new(&mut store, "dec", &settings(kind), &mut rng).unwrap();
            let bias = dec.vocab_projection().bias;
            store.get_mut(bias).data_mut()[5] = 1e6;
            let ctx = random_context(&mut rng, 4, 8);
            let r = decode(&dec, &store, &ctx, Search::Greedy, 7).unwrap();
            assert_eq!(r.tokens, [BOS, 5, 5, 5, 5, 5, 5]);
            assert!(!r.finished());
            assert_eq!(r, decode(&dec, &store, &ctx, Search::Greedy, 7).unwrap());
        }
    }

    #[test]
    fn attention_rows_are_distributions_and_beam_one_is_greedy() {
        for kind in [DecoderKind::Recurrent, DecoderKind::MaskedAttention] {
            let mut rng = seeded_rng(4, 0);
            let mut store = ParamStore::new();
            let dec = Decoder::new(&mut store, "dec", &settings(kind), &mut rng).unwrap();
            let ctx = random_context(&mut rng, 5, 8);
            let g = decode(&dec, &store, &ctx, Search::Greedy, 10).unwrap();
            for row in &g.attention {
                assert_eq!(row.len(), 5);
                assert!(row.iter().all(|&w| w >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let b = decode(
                &dec,
                &store,
                &ctx,
                Search::Beam {
                    width: 1,
                    alpha: DEFAULT_ALPHA,
                },
                10,
            )
            .unwrap();
            assert_eq!(g, b);
            let b3 = decode(
                &dec,
                &store,
                &ctx,
                Search::Beam {
                    width: 3,
                    alpha: DEFAULT_ALPHA,
                },
                10,
            )
            .unwrap();
            assert!(b3.normalized_score(DEFAULT_ALPHA) >= g.normalized_score(DEFAULT_ALPHA));
        }
    }

    #[test]
    fn records_round_trip() {
        let vocab = Vocabulary::build(&[vec!["normal", "fundus"]], 1).unwrap();
        let n = vocab.id("normal");
        let f = vocab.id("fundus");
        let result = DecodeResult {
            tokens: vec![BOS, n, f, EOS],
            log_probs: vec![-0.1, -0.25, -1e-3],
            attention: vec![
                vec![0.5, 0.1, 0.1, 0.3],
                vec![0.25; 4],
                vec![0.0, 0.0, 0.0, 1.0],
            ],
        };
        let rec = DecodeRecord::new("s\t1", &result, 3, &vocab).unwrap();
        assert_eq!(rec.report, "normal fundus");
        assert_eq!(rec.steps[0].top[0], (true, 0, 0.5));
        assert_eq!(rec.steps[0].top[1], (false, 0, 0.3));
        assert_eq!(rec.steps[2].token, "<eos>");
        let text = rec.to_text() + &rec.to_text();
        let parsed = DecodeRecord::parse_all(&text).unwrap();
        assert_eq!(parsed, vec![rec.clone(), rec]);
        assert!(DecodeRecord::parse_all("sample\tx\nstep\t0\ta\t-1\n").is_err());
    }
}
