//! Transformer decoder with causal self-attention and cross-attention to
//! the fused memory.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{causal_mask, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::text::TokenId;

#[derive(Debug, Clone)]
struct Layer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct MaskedDecoder {
    embedding: ParamId,
    positions: ParamId,
    layers: Vec<Layer>,
    vocab_proj: Linear,
    max_positions: usize,
}

impl MaskedDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        hidden: usize,
        heads: usize,
        layers: usize,
        ffn_dim: usize,
        max_positions: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config(
                "masked decoder needs at least one layer".into(),
            ));
        }
        let embedding = store.xavier(format!("{name}.embedding"), vocab, hidden, rng)?;
        let positions = store.xavier(format!("{name}.positions"), max_positions, hidden, rng)?;
        let mut ls = Vec::with_capacity(layers);
        for l in 0..layers {
            let p = format!("{name}.layer{l}");
            ls.push(Layer {
                self_attn: MultiHeadAttention::new(
                    store,
                    &format!("{p}.self"),
                    hidden,
                    heads,
                    rng,
                )?,
                norm1: LayerNorm::new(store, &format!("{p}.ln1"), hidden)?,
                cross_attn: MultiHeadAttention::new(
                    store,
                    &format!("{p}.cross"),
                    hidden,
                    heads,
                    rng,
                )?,
                norm2: LayerNorm::new(store, &format!("{p}.ln2"), hidden)?,
                ffn: FeedForward::new(store, &format!("{p}.ffn"), hidden, ffn_dim, rng)?,
                norm3: LayerNorm::new(store, &format!("{p}.ln3"), hidden)?,
            });
        }
        Ok(MaskedDecoder {
            embedding,
            positions,
            layers: ls,
            vocab_proj: Linear::new(store, &format!("{name}.vocab"), hidden, vocab, rng)?,
            max_positions,
        })
    }

    pub fn vocab_projection(&self) -> &Linear {
        &self.vocab_proj
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    /// Logits `[T×V]` and the last layer's cross-attention `[T×M]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        global: Var,
        memory: Var,
        tokens: &[TokenId],
        dropout: f64,
    ) -> Result<(Var, Tensor)> {
        let t = tokens.len();
        if t == 0 || t > self.max_positions {
            return Err(Error::shape(
                "masked decoder",
                format!("{t} positions, table holds {}", self.max_positions),
            ));
        }
        let table = tape.param(self.embedding);
        let x = tape.embedding(table, tokens)?;
        let pos = tape.param(self.positions);
        let pos = tape.slice_rows(pos, 0, t)?;
        let x = tape.add(x, pos)?;
        let mut x = tape.add_bias(x, global)?;
        x = tape.dropout(x, dropout)?;
        let mask = tape.constant(causal_mask(t));
        let mut cross = None;
        for layer in &self.layers {
            let a = layer.self_attn.forward(tape, x, x, Some(mask))?.output;
            let a = tape.dropout(a, dropout)?;
            let r = tape.add(x, a)?;
            x = layer.norm1.forward(tape, r)?;
            let c = layer.cross_attn.forward(tape, x, memory, None)?;
            cross = Some(c.weights);
            let co = tape.dropout(c.output, dropout)?;
            let r = tape.add(x, co)?;
            x = layer.norm2.forward(tape, r)?;
            let f = layer.ffn.forward(tape, x)?;
            let f = tape.dropout(f, dropout)?;
            let r = tape.add(x, f)?;
            x = layer.norm3.forward(tape, r)?;
        }
        let logits = self.vocab_proj.forward(tape, x)?;
        Ok((logits, cross.expect("at least one layer")))
    }
}
