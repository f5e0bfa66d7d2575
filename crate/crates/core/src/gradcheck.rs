//! Central finite-difference checks of every tape operation and of the
//! end-to-end captioning loss.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{GeometryMode, GluPlacement, ModelConfig, PositionMode};
use crate::encoder::RegionSet;
use crate::error::Result;
use crate::layers::Dropout;
use crate::model::sequence_loss;
use crate::params::{BoundModel, ModelParams};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor per unit of loss magnitude. Rounding in the loss puts
/// about `eps * |loss| / STEP` of noise on each central difference, so
/// gradients below `REL_FLOOR * |loss|` compare absolutely.
const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR * max(|loss|, 1))`.
pub fn relative_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = REL_FLOOR * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Input (or parameter) holding the worst element.
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Compares the tape gradient of `sum(f(inputs) ⊙ R)` for a fixed random
/// `R` against central differences, element by element.
pub fn check_function(
    name: &str,
    inputs: &[Tensor],
    f: &Build<'_>,
    rng: &mut ChaCha8Rng,
    fault: Option<OpKind>,
) -> Result<CheckResult> {
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.param(t.clone())).collect();
    let out = f(&mut probe, &vars)?;
    let out_shape = probe.shape(out).to_vec();
    let n: usize = out_shape.iter().product();
    let weights = Tensor::new(&out_shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;

    let loss_of = |values: &[Tensor], fault: Option<OpKind>| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        if let Some(k) = fault {
            tape.inject_fault(k);
        }
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let w = tape.constant(weights.clone());
        let weighted = tape.hadamard(out, w)?;
        let loss = tape.sum(weighted)?;
        Ok((tape, vars, loss))
    };

    let (tape, vars, loss) = loss_of(inputs, fault)?;
    let grads = tape.backward(loss)?;
    let at = tape.value(loss).item();
    let mut worst = CheckResult {
        name: name.to_string(),
        input: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel_err: -1.0,
        passed: true,
    };
    let mut values = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, &tape);
        for i in 0..values[k].len() {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + STEP;
            let (t, _, l) = loss_of(&values, None)?;
            let up = t.value(l).item();
            values[k].data_mut()[i] = orig - STEP;
            let (t, _, l) = loss_of(&values, None)?;
            let down = t.value(l).item();
            values[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.data()[i];
            let err = relative_error(a, numeric, at);
            if err > worst.rel_err {
                worst = CheckResult {
                    input: format!("input{k}"),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_err: err,
                    ..worst
                };
            }
        }
    }
    worst.passed = worst.rel_err <= TOLERANCE;
    Ok(worst)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// Values bounded away from zero, for checks across the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

/// One check per differentiable operation.
pub fn op_checks(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| rand_tensor(rng, s);
    let cases: Vec<(&str, Vec<Tensor>, Box<Build<'_>>)> = vec![
        ("matmul", vec![r(rng, &[2, 3]), r(rng, &[3, 4])], Box::new(|t, v| Ok(t.matmul(v[0], v[1])?))),
        ("matmul_t", vec![r(rng, &[2, 3]), r(rng, &[4, 3])], Box::new(|t, v| Ok(t.matmul_t(v[0], v[1])?))),
        ("add", vec![r(rng, &[2, 3]), r(rng, &[2, 3])], Box::new(|t, v| Ok(t.add(v[0], v[1])?))),
        ("add_bias", vec![r(rng, &[3, 4]), r(rng, &[4])], Box::new(|t, v| Ok(t.add_bias(v[0], v[1])?))),
        ("hadamard", vec![r(rng, &[2, 3]), r(rng, &[2, 3])], Box::new(|t, v| Ok(t.hadamard(v[0], v[1])?))),
        ("scale", vec![r(rng, &[2, 3])], Box::new(|t, v| Ok(t.scale(v[0], -1.7)?))),
        ("relu", vec![away_from_zero(rng, &[3, 4])], Box::new(|t, v| Ok(t.relu(v[0])?))),
        ("sigmoid", vec![r(rng, &[2, 3])], Box::new(|t, v| Ok(t.sigmoid(v[0])?))),
        ("tanh", vec![r(rng, &[2, 3])], Box::new(|t, v| Ok(t.tanh(v[0])?))),
        ("softmax_rows", vec![r(rng, &[3, 4])], Box::new(|t, v| Ok(t.softmax_rows(v[0])?))),
        ("log_softmax_rows", vec![r(rng, &[3, 4])], Box::new(|t, v| Ok(t.log_softmax_rows(v[0])?))),
        (
            "layer_norm",
            vec![r(rng, &[3, 4]), r(rng, &[4]), r(rng, &[4])],
            Box::new(|t, v| Ok(t.layer_norm(v[0], v[1], v[2], 1e-5)?)),
        ),
        ("concat_last_dim", vec![r(rng, &[2, 3]), r(rng, &[2, 2])], Box::new(|t, v| Ok(t.concat_last_dim(v[0], v[1])?))),
        (
            "concat_rows",
            vec![r(rng, &[1, 3]), r(rng, &[2, 3])],
            Box::new(|t, v| Ok(t.concat_rows(&[v[0], v[1], v[0]])?)),
        ),
        ("slice_cols", vec![r(rng, &[3, 5])], Box::new(|t, v| Ok(t.slice_cols(v[0], 1, 3)?))),
        ("slice_rows", vec![r(rng, &[4, 3])], Box::new(|t, v| Ok(t.slice_rows(v[0], 1, 2)?))),
        ("mean_rows", vec![r(rng, &[3, 4])], Box::new(|t, v| Ok(t.mean_rows(v[0])?))),
        ("repeat_rows", vec![r(rng, &[1, 3])], Box::new(|t, v| Ok(t.repeat_rows(v[0], 3)?))),
        ("embedding_lookup", vec![r(rng, &[5, 3])], Box::new(|t, v| Ok(t.embedding_lookup(v[0], &[4, 1, 4, 0])?))),
        ("sum", vec![r(rng, &[2, 3])], Box::new(|t, v| Ok(t.sum(v[0])?))),
        (
            "select_sum",
            vec![r(rng, &[3, 4])],
            Box::new(|t, v| Ok(t.select_sum(v[0], &[(0, 1), (2, 3), (0, 1)])?)),
        ),
    ];
    cases
        .iter()
        .map(|(name, inputs, f)| check_function(name, inputs, f.as_ref(), rng, fault))
        .collect()
}

/// Tiny model configurations that together exercise every component.
pub fn model_configs() -> Vec<(&'static str, ModelConfig)> {
    let tiny = ModelConfig {
        d_in: 3,
        d_model: 4,
        d_hidden: 3,
        d_word: 3,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        d_ff: 5,
        vocab_size: 7,
        t_max: 4,
        ..ModelConfig::default()
    };
    vec![
        (
            "model(concat, lstm, glu enc_dec, self-attn)",
            ModelConfig {
                geometry: GeometryMode::Concat,
                position: PositionMode::Lstm,
                glu: GluPlacement::EncDec,
                dec_self_attn: true,
                ..tiny.clone()
            },
        ),
        (
            "model(add, sinusoidal, glu enc)",
            ModelConfig {
                geometry: GeometryMode::Add,
                position: PositionMode::Sinusoidal,
                glu: GluPlacement::Enc,
                enc_layers: 2,
                ..tiny.clone()
            },
        ),
        (
            "model(off, lstm, no glu)",
            ModelConfig {
                geometry: GeometryMode::Off,
                position: PositionMode::Lstm,
                glu: GluPlacement::None,
                ..tiny
            },
        ),
    ]
}

/// Gradient of the summed caption NLL with respect to every parameter.
pub fn model_check(
    name: &str,
    cfg: &ModelConfig,
    seed: u64,
    rng: &mut ChaCha8Rng,
    fault: Option<OpKind>,
) -> Result<CheckResult> {
    let params = ModelParams::init(&ModelConfig { seed, ..cfg.clone() })?;
    let n = 3;
    let appearance = rand_tensor(rng, &[n, cfg.d_in]);
    let boxes: Vec<[f64; 4]> = (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..0.5);
            let y = rng.random_range(0.0..0.5);
            [x, y, x + rng.random_range(0.1..0.5), y + rng.random_range(0.1..0.5)]
        })
        .collect();
    let regions = RegionSet::from_boxes(appearance, &boxes)?;
    let words: Vec<usize> = (0..3).map(|_| rng.random_range(3..cfg.vocab_size)).collect();

    let loss = |p: &ModelParams, fault: Option<OpKind>| -> Result<(Tape, BoundModel, Var)> {
        let mut tape = Tape::new();
        if let Some(k) = fault {
            tape.inject_fault(k);
        }
        let bound = BoundModel::bind(&mut tape, p, cfg)?;
        let out = sequence_loss(&mut tape, &bound, &regions, &words, cfg, &mut Dropout::off())?;
        Ok((tape, bound, out.nll))
    };

    let (tape, bound, l) = loss(&params, fault)?;
    let grads = tape.backward(l)?;
    let at = tape.value(l).item();
    let mut worst = CheckResult {
        name: name.to_string(),
        input: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel_err: -1.0,
        passed: true,
    };
    let pattern = tape.relu_pattern();
    let mut p = params.clone();
    for (pname, var) in bound.vars() {
        let analytic = grads.get_or_zeros(var, &tape);
        for i in 0..analytic.len() {
            let orig = p.get(pname).expect("bound name").data()[i];
            let mut at_offset = |steps: f64| -> Result<(f64, bool)> {
                p.get_mut(pname).expect("bound name").data_mut()[i] = orig + steps * STEP;
                let (t, _, v) = loss(&p, None)?;
                p.get_mut(pname).expect("bound name").data_mut()[i] = orig;
                Ok((t.value(v).item(), t.relu_pattern() == pattern))
            };
            let (up, up_same) = at_offset(1.0)?;
            let (down, down_same) = at_offset(-1.0)?;
            let numeric = if up_same == down_same {
                (up - down) / (2.0 * STEP)
            } else {
                // the stencil straddles a ReLU kink: second-order one-sided
                // difference on the side that keeps the activation pattern
                let dir = if up_same { 1.0 } else { -1.0 };
                let (near, far) = (if up_same { up } else { down }, at_offset(2.0 * dir)?.0);
                dir * (4.0 * near - far - 3.0 * at) / (2.0 * STEP)
            };
            let a = analytic.data()[i];
            let err = relative_error(a, numeric, at);
            if err > worst.rel_err {
                worst = CheckResult {
                    input: pname.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_err: err,
                    ..worst
                };
            }
        }
    }
    worst.passed = worst.rel_err <= TOLERANCE;
    Ok(worst)
}

/// Every op check followed by the end-to-end model checks.
pub fn run_suite(seed: u64, fault: Option<OpKind>) -> Result<GradcheckReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = op_checks(&mut rng, fault)?;
    for (name, cfg) in model_configs() {
        checks.push(model_check(name, &cfg, seed, &mut rng, fault)?);
    }
    Ok(GradcheckReport {
        seed,
        checks,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0, 0.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0, 0.0) < 1e-5);
        assert!((relative_error(2e-6, 1e-6, 10.0) - 0.1).abs() < 1e-12);
    }
}
