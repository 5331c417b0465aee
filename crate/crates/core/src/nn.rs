//! Parameterized building blocks shared by the encoders, fusers and
//! decoders. Each layer only holds [`ParamId`]s; values live in the
//! [`ParamStore`] and computation is recorded on a [`Tape`].

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, Var};

/// Additive mask value for disallowed attention positions. `exp` of it
/// underflows to exactly zero, so masked positions contribute nothing.
pub const MASKED: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Linear {
            weight: store.xavier(format!("{name}.weight"), fan_in, fan_out, rng)?,
            bias: store.zeros(format!("{name}.bias"), &[fan_out])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.filled(format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.zeros(format!("{name}.beta"), &[dim])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone)]
struct Head {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

/// Multi-head scaled dot-product attention. Head outputs are projected back
/// to the model width and summed, which equals concatenation followed by a
/// single output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    heads: Vec<Head>,
    out_bias: ParamId,
    head_dim: usize,
}

/// Output of one attention call.
pub struct AttentionOutput {
    pub output: Var,
    /// Head-averaged attention weights `[queries × keys]`; each row is a
    /// probability distribution.
    pub weights: Tensor,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(crate::Error::Config(format!(
                "{heads} heads do not divide width {dim}"
            )));
        }
        let head_dim = dim / heads;
        let mut hs = Vec::with_capacity(heads);
        for h in 0..heads {
            hs.push(Head {
                wq: store.xavier(format!("{name}.h{h}.wq"), dim, head_dim, rng)?,
                wk: store.xavier(format!("{name}.h{h}.wk"), dim, head_dim, rng)?,
                wv: store.xavier(format!("{name}.h{h}.wv"), dim, head_dim, rng)?,
                wo: store.xavier(format!("{name}.h{h}.wo"), head_dim, dim, rng)?,
            });
        }
        Ok(MultiHeadAttention {
            heads: hs,
            out_bias: store.zeros(format!("{name}.bo"), &[dim])?,
            head_dim,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn query_weights(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.heads.iter().map(|h| h.wq)
    }

    pub fn key_weights(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.heads.iter().map(|h| h.wk)
    }

    /// `mask`, when given, is an additive `[queries × keys]` constant.
    pub fn forward(
        &self,
        tape: &mut Tape,
        queries: Var,
        keys: Var,
        mask: Option<Var>,
    ) -> Result<AttentionOutput> {
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut sum: Option<Var> = None;
        let mut weights: Option<Vec<f64>> = None;
        for head in &self.heads {
            let (wq, wk, wv, wo) = (
                tape.param(head.wq),
                tape.param(head.wk),
                tape.param(head.wv),
                tape.param(head.wo),
            );
            let q = tape.matmul(queries, wq)?;
            let k = tape.matmul(keys, wk)?;
            let v = tape.matmul(keys, wv)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let mut scores = tape.scale(scores, scale)?;
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let attn = tape.softmax_rows(scores)?;
            match &mut weights {
                Some(acc) => acc
                    .iter_mut()
                    .zip(tape.value(attn).data())
                    .for_each(|(a, w)| *a += w),
                None => weights = Some(tape.value(attn).data().to_vec()),
            }
            let ctx = tape.matmul(attn, v)?;
            let out = tape.matmul(ctx, wo)?;
            sum = Some(match sum {
                Some(s) => tape.add(s, out)?,
                None => out,
            });
        }
        let bo = tape.param(self.out_bias);
        let output = tape.add_bias(sum.expect("at least one head"), bo)?;
        let rows = tape.shape(queries)[0];
        let cols = tape.shape(keys)[0];
        let n = self.heads.len() as f64;
        let mut w = weights.expect("at least one head");
        if self.heads.len() > 1 {
            w.iter_mut().for_each(|x| *x /= n);
        }
        Ok(AttentionOutput {
            output,
            weights: Tensor::new(&[rows, cols], w)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng)?,
            outer: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, x)?;
        let h = tape.relu(h)?;
        self.outer.forward(tape, h)
    }
}

/// Post-norm transformer encoder layer with unmasked self-attention.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_dim, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, dropout: f64) -> Result<Var> {
        let a = self.attn.forward(tape, x, x, None)?.output;
        let a = tape.dropout(a, dropout)?;
        let x = tape.add(x, a)?;
        let x = self.norm1.forward(tape, x)?;
        let f = self.ffn.forward(tape, x)?;
        let f = tape.dropout(f, dropout)?;
        let x = tape.add(x, f)?;
        self.norm2.forward(tape, x)
    }
}

/// `[n×n]` additive mask letting position `i` see positions `≤ i`.
pub fn causal_mask(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    let d = t.data_mut();
    for i in 0..n {
        for j in i + 1..n {
            d[i * n + j] = MASKED;
        }
    }
    t
}

/// Sets every value of the listed parameters to zero.
pub fn zero_params(store: &mut ParamStore, ids: impl IntoIterator<Item = ParamId>) {
    for id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
}
