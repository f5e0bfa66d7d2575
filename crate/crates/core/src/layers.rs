//! Sub-layers shared by the encoder and decoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Masked logits get this added; `exp` of it underflows to exactly zero.
pub const MASK_VALUE: f64 = -1e30;

#[derive(Clone, Copy, Debug)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GluVars {
    pub w_g: Var,
    pub b_g: Var,
    pub w_i: Var,
    pub b_i: Var,
}

pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

pub fn layer_norm(tape: &mut Tape, x: Var, ln: &LayerNormVars) -> Result<Var> {
    tape.layer_norm(x, ln.gain, ln.bias, LAYER_NORM_EPS)
}

/// `max(0, x W1 + b1) W2 + b2`
pub fn feed_forward(tape: &mut Tape, x: Var, ff: &FeedForwardVars) -> Result<Var> {
    let hidden = linear(tape, x, ff.w1, ff.b1)?;
    let hidden = tape.relu(hidden)?;
    linear(tape, hidden, ff.w2, ff.b2)
}

/// `sigmoid(context W_g + b_g) ⊙ (a W_i + b_i)`
pub fn gated_linear(tape: &mut Tape, context: Var, a: Var, glu: &GluVars) -> Result<Var> {
    let gate = linear(tape, context, glu.w_g, glu.b_g)?;
    let gate = tape.sigmoid(gate)?;
    let branch = linear(tape, a, glu.w_i, glu.b_i)?;
    tape.hadamard(gate, branch)
}

pub struct Attended {
    pub output: Var,
    /// Row-stochastic attention matrix.
    pub weights: Var,
}

/// `softmax(q kᵀ / temperature + mask) v`
pub fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    temperature: f64,
    mask: Option<Var>,
) -> Result<Attended> {
    let logits = tape.matmul_t(q, k)?;
    let mut logits = tape.scale(logits, 1.0 / temperature)?;
    if let Some(mask) = mask {
        logits = tape.add(logits, mask)?;
    }
    let weights = tape.softmax_rows(logits)?;
    let output = tape.matmul(weights, v)?;
    Ok(Attended { output, weights })
}

/// Additive causal mask for `n` query rows attending over the same `n` rows.
pub fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for r in 0..n {
        for c in r + 1..n {
            m.data_mut()[r * n + c] = MASK_VALUE;
        }
    }
    m
}

/// Sinusoidal position encodings for steps `0..steps`.
pub fn sinusoidal_encoding(steps: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; steps * d];
    for t in 0..steps {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[steps, d], data).expect("positive steps and width")
}

/// Inverted dropout. Inactive unless built with [`Dropout::training`].
pub struct Dropout {
    pub attn_rate: f64,
    pub lstm_rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout {
            attn_rate: 0.0,
            lstm_rate: 0.0,
            rng: None,
        }
    }

    pub fn training(attn_rate: f64, lstm_rate: f64, rng: ChaCha8Rng) -> Self {
        Dropout {
            attn_rate,
            lstm_rate,
            rng: Some(rng),
        }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = tape.constant(Tensor::new(&shape, mask)?);
        tape.hadamard(x, mask)
    }

    pub fn attn(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let rate = self.attn_rate;
        self.apply(tape, x, rate)
    }

    pub fn lstm(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let rate = self.lstm_rate;
        self.apply(tape, x, rate)
    }
}
