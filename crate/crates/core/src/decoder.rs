//! Position-aware decoder.
//!
//! A position-LSTM consumes `[w_t ; mean(X^r)]` and its hidden state, mapped
//! to `d_model`, becomes the first layer's query. Later layers query with the
//! previous layer's output; keys and values always come from the refined
//! region features. The sinusoidal variant replaces the LSTM with a word
//! projection plus fixed position encodings.
//!
//! Teacher forcing runs all steps as one `T × d_model` matrix. Without the
//! optional masked self-attention sub-layer every row only sees its own
//! query, so step `t` never depends on later tokens.

use crate::error::{GatError, Result};
use crate::layers::{
    attend, causal_mask, feed_forward, gated_linear, layer_norm, linear, sinusoidal_encoding,
    Dropout, FeedForwardVars, GluVars, LayerNormVars,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gate blocks inside the packed LSTM weights, in this order.
pub const LSTM_GATES: [&str; 4] = ["input", "forget", "candidate", "output"];

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// `(d_word + d_model) × 4 d_hidden`
    pub w_x: Var,
    /// `d_hidden × 4 d_hidden`
    pub w_h: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnHeadVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

#[derive(Clone, Debug)]
pub struct SelfAttnVars {
    pub heads: Vec<AttnHeadVars>,
    pub w_o: Var,
    pub norm: LayerNormVars,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerVars {
    pub self_attn: Option<SelfAttnVars>,
    pub heads: Vec<AttnHeadVars>,
    pub w_o: Var,
    pub glu: Option<GluVars>,
    pub ff: FeedForwardVars,
    pub norm1: LayerNormVars,
    pub norm2: LayerNormVars,
}

#[derive(Clone, Copy, Debug)]
pub enum QueryInput {
    Lstm { lstm: LstmVars, w_q: Var, b_q: Var },
    Sinusoidal { w_word: Var, b_word: Var },
}

#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub embed: Var,
    pub input: QueryInput,
    pub layers: Vec<DecoderLayerVars>,
    /// `V × d_model`
    pub w_p: Var,
    pub b_p: Var,
}

/// Recurrent state between decoding steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h: Tensor,
    pub c: Tensor,
    pub t: usize,
    /// Tokens consumed so far, starting with BOS.
    pub prefix: Vec<usize>,
    /// First-layer query rows so far; kept only for masked self-attention.
    queries: Vec<Tensor>,
}

impl DecoderState {
    pub fn initial(d_hidden: usize) -> Self {
        DecoderState {
            h: Tensor::zeros(&[1, d_hidden]),
            c: Tensor::zeros(&[1, d_hidden]),
            t: 0,
            prefix: Vec::new(),
            queries: Vec::new(),
        }
    }
}

/// Keys and values of the region features, per decoder layer and head.
pub struct Memory {
    heads: Vec<Vec<(Var, Var)>>,
    /// `mean_rows(X^r)`
    pub pooled: Var,
}

pub fn prepare_memory(tape: &mut Tape, x_r: Var, dec: &DecoderVars) -> Result<Memory> {
    let mut heads = Vec::with_capacity(dec.layers.len());
    for layer in &dec.layers {
        let mut kv = Vec::with_capacity(layer.heads.len());
        for head in &layer.heads {
            let k = tape.matmul(x_r, head.w_k)?;
            let v = tape.matmul(x_r, head.w_v)?;
            kv.push((k, v));
        }
        heads.push(kv);
    }
    let pooled = tape.mean_rows(x_r)?;
    Ok(Memory { heads, pooled })
}

/// One LSTM update from pre-projected input gates `x W_x + b`.
pub fn lstm_update(tape: &mut Tape, gates_in: Var, h: Var, c: Var, w_h: Var) -> Result<(Var, Var)> {
    let d_h = tape.shape(w_h)[0];
    let recur = tape.matmul(h, w_h)?;
    let gates = tape.add(gates_in, recur)?;
    let i = tape.slice_cols(gates, 0, d_h)?;
    let i = tape.sigmoid(i)?;
    let f = tape.slice_cols(gates, d_h, d_h)?;
    let f = tape.sigmoid(f)?;
    let g = tape.slice_cols(gates, 2 * d_h, d_h)?;
    let g = tape.tanh(g)?;
    let o = tape.slice_cols(gates, 3 * d_h, d_h)?;
    let o = tape.sigmoid(o)?;
    let keep = tape.hadamard(f, c)?;
    let write = tape.hadamard(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next)?;
    let h_next = tape.hadamard(o, squashed)?;
    Ok((h_next, c_next))
}

/// `h_t, c_t = LSTM(x_t, (h_{t-1}, c_{t-1}))` on tape variables.
pub fn lstm_cell(tape: &mut Tape, x: Var, h: Var, c: Var, p: &LstmVars) -> Result<(Var, Var)> {
    let gates_in = linear(tape, x, p.w_x, p.b)?;
    lstm_update(tape, gates_in, h, c, p.w_h)
}

/// Value-level LSTM step: consumes `token` with input `x_t`.
pub fn lstm_step(
    tape: &mut Tape,
    x_t: Var,
    token: usize,
    state: &DecoderState,
    p: &LstmVars,
) -> Result<DecoderState> {
    let h = tape.constant(state.h.clone());
    let c = tape.constant(state.c.clone());
    let (h, c) = lstm_cell(tape, x_t, h, c, p)?;
    let mut prefix = state.prefix.clone();
    prefix.push(token);
    Ok(DecoderState {
        h: tape.value(h).clone(),
        c: tape.value(c).clone(),
        t: state.t + 1,
        prefix,
        queries: state.queries.clone(),
    })
}

fn multi_head(
    tape: &mut Tape,
    x: Var,
    heads: &[AttnHeadVars],
    kv: &[(Var, Var)],
    w_o: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let mut joined: Option<Var> = None;
    for (head, &(k, v)) in heads.iter().zip(kv) {
        let d_k = tape.shape(head.w_q)[1] as f64;
        let q = tape.matmul(x, head.w_q)?;
        let out = attend(tape, q, k, v, d_k.sqrt(), mask)?.output;
        joined = Some(match joined {
            None => out,
            Some(acc) => tape.concat_last_dim(acc, out)?,
        });
    }
    let joined = joined.ok_or_else(|| GatError::Config("decoder layer without heads".into()))?;
    Ok(tape.matmul(joined, w_o)?)
}

/// Runs the decoder layers over query rows `q` (`R × d_model`). With
/// self-attention enabled, row `r` attends to rows `0..=r`.
pub fn decoder_layers(
    tape: &mut Tape,
    q: Var,
    memory: &Memory,
    layers: &[DecoderLayerVars],
    dropout: &mut Dropout,
) -> Result<Var> {
    let mut x = q;
    for (layer, kv) in layers.iter().zip(&memory.heads) {
        if let Some(sa) = &layer.self_attn {
            let rows = tape.shape(x)[0];
            let mask = tape.constant(causal_mask(rows));
            let mut own = Vec::with_capacity(sa.heads.len());
            for head in &sa.heads {
                let k = tape.matmul(x, head.w_k)?;
                let v = tape.matmul(x, head.w_v)?;
                own.push((k, v));
            }
            let attn = multi_head(tape, x, &sa.heads, &own, sa.w_o, Some(mask))?;
            let attn = dropout.attn(tape, attn)?;
            let sum = tape.add(x, attn)?;
            x = layer_norm(tape, sum, &sa.norm)?;
        }
        let cross = multi_head(tape, x, &layer.heads, kv, layer.w_o, None)?;
        let cross = match &layer.glu {
            Some(glu) => {
                let context = tape.concat_last_dim(x, cross)?;
                gated_linear(tape, context, cross, glu)?
            }
            None => cross,
        };
        let cross = dropout.attn(tape, cross)?;
        let z = tape.add(x, cross)?;
        let z = layer_norm(tape, z, &layer.norm1)?;
        let ff = feed_forward(tape, z, &layer.ff)?;
        let ff = dropout.attn(tape, ff)?;
        let out = tape.add(z, ff)?;
        x = layer_norm(tape, out, &layer.norm2)?;
    }
    Ok(x)
}

/// Projects the position encoding `h_t` to `d_model` and runs all layers,
/// returning `F_t`.
pub fn decoder_step(
    tape: &mut Tape,
    h_t: Var,
    x_r: Var,
    dec: &DecoderVars,
    dropout: &mut Dropout,
) -> Result<Var> {
    let QueryInput::Lstm { w_q, b_q, .. } = dec.input else {
        return Err(GatError::Config("decoder_step needs the position-LSTM query input".into()));
    };
    let memory = prepare_memory(tape, x_r, dec)?;
    let q = linear(tape, h_t, w_q, b_q)?;
    decoder_layers(tape, q, &memory, &dec.layers, dropout)
}

/// `W_p F + b_p` row by row.
pub fn output_logits(tape: &mut Tape, f: Var, w_p: Var, b_p: Var) -> Result<Var> {
    let logits = tape.matmul_t(f, w_p)?;
    Ok(tape.add_bias(logits, b_p)?)
}

/// `softmax(W_p F_t + b_p)`
pub fn word_distribution(tape: &mut Tape, f: Var, w_p: Var, b_p: Var) -> Result<Var> {
    let logits = output_logits(tape, f, w_p, b_p)?;
    Ok(tape.softmax_rows(logits)?)
}

/// Logits for every step of a teacher-forced input sequence (`T × V`).
/// `inputs[t]` is the token consumed at step `t` (BOS first).
pub fn teacher_forced_logits(
    tape: &mut Tape,
    memory: &Memory,
    inputs: &[usize],
    dec: &DecoderVars,
    dropout: &mut Dropout,
) -> Result<Var> {
    let steps = inputs.len();
    let emb = tape.embedding_lookup(dec.embed, inputs)?;
    let q = match dec.input {
        QueryInput::Lstm { lstm, w_q, b_q } => {
            let pooled = tape.repeat_rows(memory.pooled, steps)?;
            let x = tape.concat_last_dim(emb, pooled)?;
            let gates_in = linear(tape, x, lstm.w_x, lstm.b)?;
            let d_h = tape.shape(lstm.w_h)[0];
            let mut h = tape.constant(Tensor::zeros(&[1, d_h]));
            let mut c = tape.constant(Tensor::zeros(&[1, d_h]));
            let mut hs = Vec::with_capacity(steps);
            for t in 0..steps {
                let row = tape.slice_rows(gates_in, t, 1)?;
                (h, c) = lstm_update(tape, row, h, c, lstm.w_h)?;
                hs.push(dropout.lstm(tape, h)?);
            }
            let hs = tape.concat_rows(&hs)?;
            linear(tape, hs, w_q, b_q)?
        }
        QueryInput::Sinusoidal { w_word, b_word } => {
            let words = linear(tape, emb, w_word, b_word)?;
            let d = tape.shape(words)[1];
            let pe = tape.constant(sinusoidal_encoding(steps, d));
            tape.add(words, pe)?
        }
    };
    let f = decoder_layers(tape, q, memory, &dec.layers, dropout)?;
    output_logits(tape, f, dec.w_p, dec.b_p)
}

/// Incremental decoding: consumes `token` and returns the next-word logits
/// (`1 × V`) with the updated state.
pub fn step_logits(
    tape: &mut Tape,
    memory: &Memory,
    state: &DecoderState,
    token: usize,
    dec: &DecoderVars,
) -> Result<(Var, DecoderState)> {
    let emb = tape.embedding_lookup(dec.embed, &[token])?;
    let (q, mut next) = match dec.input {
        QueryInput::Lstm { lstm, w_q, b_q } => {
            let x = tape.concat_last_dim(emb, memory.pooled)?;
            let next = lstm_step(tape, x, token, state, &lstm)?;
            let h = tape.constant(next.h.clone());
            (linear(tape, h, w_q, b_q)?, next)
        }
        QueryInput::Sinusoidal { w_word, b_word } => {
            let words = linear(tape, emb, w_word, b_word)?;
            let d = tape.shape(words)[1];
            let pe = sinusoidal_encoding(state.t + 1, d);
            let pe = tape.constant(Tensor::row(pe.row_slice(state.t)));
            let q = tape.add(words, pe)?;
            let mut next = state.clone();
            next.t += 1;
            next.prefix.push(token);
            (q, next)
        }
    };
    let mut dropout = Dropout::off();
    let uses_history = dec.layers.iter().any(|l| l.self_attn.is_some());
    let f = if uses_history {
        next.queries.push(tape.value(q).clone());
        let rows: Vec<Var> = next.queries.iter().map(|r| tape.constant(r.clone())).collect();
        let all = tape.concat_rows(&rows)?;
        let f = decoder_layers(tape, all, memory, &dec.layers, &mut dropout)?;
        tape.slice_rows(f, next.queries.len() - 1, 1)?
    } else {
        decoder_layers(tape, q, memory, &dec.layers, &mut dropout)?
    };
    let logits = output_logits(tape, f, dec.w_p, dec.b_p)?;
    Ok((logits, next))
}
