//! Attention-augmented LSTM decoder.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::Linear;
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::text::TokenId;

#[derive(Debug, Clone)]
pub struct RecurrentDecoder {
    embedding: ParamId,
    /// Gate weights for the token input, previous hidden state and
    /// attention context; columns are `[i | f | o | g]`.
    w_x: ParamId,
    w_h: ParamId,
    w_c: ParamId,
    gate_bias: ParamId,
    w_att: ParamId,
    init_h: Linear,
    init_c: Linear,
    out_h: Linear,
    out_c: ParamId,
    vocab_proj: Linear,
    hidden: usize,
}

/// Recurrent state carried between steps.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub h: Var,
    pub c: Var,
}

pub struct StepVars {
    pub logits: Var,
    pub attention: Var,
    pub state: LstmVars,
}

impl RecurrentDecoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let h4 = 4 * hidden;
        let mut bias = vec![0.0; h4];
        bias[hidden..2 * hidden].fill(1.0);
        Ok(RecurrentDecoder {
            embedding: store.xavier(format!("{name}.embedding"), vocab, hidden, rng)?,
            w_x: store.xavier(format!("{name}.w_x"), hidden, h4, rng)?,
            w_h: store.xavier(format!("{name}.w_h"), hidden, h4, rng)?,
            w_c: store.xavier(format!("{name}.w_c"), hidden, h4, rng)?,
            gate_bias: store.insert(format!("{name}.gate_bias"), Tensor::new(&[h4], bias)?)?,
            w_att: store.xavier(format!("{name}.w_att"), hidden, hidden, rng)?,
            init_h: Linear::new(store, &format!("{name}.init_h"), hidden, hidden, rng)?,
            init_c: Linear::new(store, &format!("{name}.init_c"), hidden, hidden, rng)?,
            out_h: Linear::new(store, &format!("{name}.out_h"), hidden, hidden, rng)?,
            out_c: store.xavier(format!("{name}.out_c"), hidden, hidden, rng)?,
            vocab_proj: Linear::new(store, &format!("{name}.vocab"), hidden, vocab, rng)?,
            hidden,
        })
    }

    pub fn vocab_projection(&self) -> &Linear {
        &self.vocab_proj
    }

    pub fn attention_projection(&self) -> ParamId {
        self.w_att
    }

    pub fn initial_state(&self, tape: &mut Tape, global: Var) -> Result<LstmVars> {
        let h = self.init_h.forward(tape, global)?;
        let h = tape.tanh(h)?;
        let c = self.init_c.forward(tape, global)?;
        let c = tape.tanh(c)?;
        Ok(LstmVars { h, c })
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        memory: Var,
        state: LstmVars,
        prev: TokenId,
        dropout: f64,
    ) -> Result<StepVars> {
        let n = self.hidden;
        let w_att = tape.param(self.w_att);
        let q = tape.matmul(state.h, w_att)?;
        let mt = tape.transpose(memory)?;
        let scores = tape.matmul(q, mt)?;
        let scores = tape.scale(scores, 1.0 / (n as f64).sqrt())?;
        let attention = tape.softmax_rows(scores)?;
        let ctx = tape.matmul(attention, memory)?;

        let table = tape.param(self.embedding);
        let x = tape.embedding(table, &[prev])?;
        let x = tape.dropout(x, dropout)?;
        let (wx, wh, wc, b) = (
            tape.param(self.w_x),
            tape.param(self.w_h),
            tape.param(self.w_c),
            tape.param(self.gate_bias),
        );
        let gx = tape.matmul(x, wx)?;
        let gh = tape.matmul(state.h, wh)?;
        let gc = tape.matmul(ctx, wc)?;
        let gates = tape.add(gx, gh)?;
        let gates = tape.add(gates, gc)?;
        let gates = tape.add_bias(gates, b)?;
        let i = tape.slice_cols(gates, 0, n)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice_cols(gates, n, n)?;
        let f = tape.sigmoid(f)?;
        let o = tape.slice_cols(gates, 2 * n, n)?;
        let o = tape.sigmoid(o)?;
        let g = tape.slice_cols(gates, 3 * n, n)?;
        let g = tape.tanh(g)?;
        let fc = tape.mul(f, state.c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;

        let oh = self.out_h.forward(tape, h)?;
        let w_oc = tape.param(self.out_c);
        let oc = tape.matmul(ctx, w_oc)?;
        let out = tape.add(oh, oc)?;
        let out = tape.tanh(out)?;
        let out = tape.dropout(out, dropout)?;
        let logits = self.vocab_proj.forward(tape, out)?;
        Ok(StepVars {
            logits,
            attention,
            state: LstmVars { h, c },
        })
    }

    /// Logits `[T×V]` for inputs `tokens` and the attention rows of every step.
    pub fn forward(
        &self,
        tape: &mut Tape,
        global: Var,
        memory: Var,
        tokens: &[TokenId],
        dropout: f64,
    ) -> Result<(Var, Vec<Var>)> {
        let mut state = self.initial_state(tape, global)?;
        let mut logits = Vec::with_capacity(tokens.len());
        let mut atts = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let s = self.step(tape, memory, state, t, dropout)?;
            logits.push(s.logits);
            atts.push(s.attention);
            state = s.state;
        }
        Ok((tape.concat_rows(&logits)?, atts))
    }
}
