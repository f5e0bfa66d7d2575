//! Cross-entropy training with Adam, step-decayed learning rate and
//! gradient-norm clipping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoder::RegionSet;
use crate::error::{GatError, Result};
use crate::layers::Dropout;
use crate::model::{group_pass, ExampleGrad};
use crate::parallel::parallel_map;
use crate::params::ModelParams;
use crate::tensor::TensorError;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplies the rate once every `decay_every` epochs.
    pub decay_rate: f64,
    pub decay_every: usize,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Train on every reference each epoch, or on one drawn per scene.
    pub all_references: bool,
    /// Worker threads for per-example passes; results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 16,
            lr: 5e-4,
            decay_rate: 0.8,
            decay_every: 3,
            clip_norm: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            all_references: true,
            threads: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| GatError::Config(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    /// Rate for a 1-based epoch: `lr · decay_rate^((epoch − 1) / decay_every)`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let steps = (epoch.max(1) - 1) / self.decay_every.max(1);
        self.lr * self.decay_rate.powi(steps as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(GatError::Config("epochs, batch_size and decay_every must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(GatError::Config("lr must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(GatError::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "decay_rate" => self.decay_rate = parse(key, value)?,
            "decay_every" => self.decay_every = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "all_references" => self.all_references = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Worker count from `GAT_THREADS`, else the number of available cores.
pub fn threads_from_env() -> usize {
    std::env::var("GAT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub regions: RegionSet,
    /// Reference captions as word ids, without BOS or EOS.
    pub references: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub token_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
}

struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        Adam {
            m: ModelParams::zeros_like(params),
            v: ModelParams::zeros_like(params),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("gradient for every parameter").data();
            let m = self.m.get_mut(name).expect("first moment").data_mut();
            let v = self.v.get_mut(name).expect("second moment").data_mut();
            for (i, p) in p.data_mut().iter_mut().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

fn dropout_for(cfg: &ModelConfig, step: u64, example: u64) -> Dropout {
    if cfg.attn_dropout == 0.0 && cfg.lstm_dropout == 0.0 {
        return Dropout::off();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd0_0d);
    rng.set_stream(step.wrapping_mul(1 << 20).wrapping_add(example));
    Dropout::training(cfg.attn_dropout, cfg.lstm_dropout, rng)
}

/// Captions sharing one tape. Fixed, so results do not depend on the
/// thread count.
const CAPTIONS_PER_TAPE: usize = 8;

/// Runs `batch` in groups of [`CAPTIONS_PER_TAPE`] and returns the group
/// results in batch order.
fn run_batch(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[(&RegionSet, &[usize])],
    step: u64,
    threads: usize,
) -> Result<Vec<ExampleGrad>> {
    let groups: Vec<(usize, &[(&RegionSet, &[usize])])> = batch
        .chunks(CAPTIONS_PER_TAPE)
        .enumerate()
        .map(|(g, items)| (g * CAPTIONS_PER_TAPE, items))
        .collect();
    parallel_map(&groups, threads, |_, &(first, items)| {
        let mut dropouts: Vec<Dropout> = (0..items.len())
            .map(|i| dropout_for(cfg, step, (first + i) as u64))
            .collect();
        group_pass(params, cfg, items, &mut dropouts, true)
    })
    .into_iter()
    .collect()
}

fn abort(params: &ModelParams, err: GatError, step: usize, epoch: usize) -> GatError {
    match err {
        GatError::Tensor(TensorError::NonFinite { op }) => GatError::NumericalAbort {
            param: params
                .first_non_finite()
                .map(str::to_string)
                .unwrap_or_else(|| format!("(none; first non-finite value from {op})")),
            step,
            epoch,
        },
        other => other,
    }
}

/// Trains from `ModelParams::init(cfg)`.
pub fn train(
    data: &[TrainExample],
    cfg: &ModelConfig,
    tc: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<(ModelParams, TrainReport)> {
    let params = ModelParams::init(cfg)?;
    train_from(params, data, cfg, tc, on_epoch)
}

pub fn train_from(
    mut params: ModelParams,
    data: &[TrainExample],
    cfg: &ModelConfig,
    tc: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    tc.validate()?;
    params.check_against(cfg)?;
    if data.is_empty() || data.iter().any(|e| e.references.is_empty()) {
        return Err(GatError::Contract("training needs scenes with at least one reference".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&params);
    let mut report = TrainReport {
        seed: cfg.seed,
        epochs: Vec::with_capacity(tc.epochs),
    };
    let mut step = 0usize;

    for epoch in 1..=tc.epochs {
        let started = Instant::now();
        let lr = tc.learning_rate(epoch);
        let mut items: Vec<(usize, usize)> = if tc.all_references {
            data.iter()
                .enumerate()
                .flat_map(|(i, e)| (0..e.references.len()).map(move |r| (i, r)))
                .collect()
        } else {
            data.iter()
                .enumerate()
                .map(|(i, e)| (i, rand::Rng::random_range(&mut rng, 0..e.references.len())))
                .collect()
        };
        items.shuffle(&mut rng);

        let (mut nll, mut tokens, mut correct) = (0.0, 0usize, 0usize);
        for chunk in items.chunks(tc.batch_size) {
            step += 1;
            let batch: Vec<(&RegionSet, &[usize])> = chunk
                .iter()
                .map(|&(i, r)| (&data[i].regions, data[i].references[r].as_slice()))
                .collect();
            let results = run_batch(&params, cfg, &batch, step as u64, tc.threads)
                .map_err(|e| abort(&params, e, step, epoch))?;

            let batch_tokens: usize = results.iter().map(|r| r.tokens).sum();
            let mut grad: Option<ModelParams> = None;
            for r in results {
                nll += r.nll;
                correct += r.correct;
                let g = r.grads.expect("requested gradients");
                match grad.as_mut() {
                    None => grad = Some(g),
                    Some(acc) => {
                        for (name, a) in acc.iter_mut() {
                            let src = g.get(name).expect("gradient for every parameter");
                            for (x, y) in a.data_mut().iter_mut().zip(src.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grad = grad.expect("nonempty batch");
            tokens += batch_tokens;

            let scale = 1.0 / batch_tokens as f64;
            let mut norm2 = 0.0;
            for (_, g) in grad.iter_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                    norm2 += *v * *v;
                }
            }
            let norm = norm2.sqrt();
            if !norm.is_finite() {
                return Err(GatError::NumericalAbort {
                    param: grad.first_non_finite().unwrap_or("(gradient norm)").to_string(),
                    step,
                    epoch,
                });
            }
            if norm > tc.clip_norm {
                let s = tc.clip_norm / norm;
                for (_, g) in grad.iter_mut() {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
            adam.step(&mut params, &grad, lr, tc);
            if let Some(name) = params.first_non_finite() {
                return Err(GatError::NumericalAbort {
                    param: name.to_string(),
                    step,
                    epoch,
                });
            }
        }

        let stats = EpochStats {
            epoch,
            lr,
            mean_loss: nll / tokens as f64,
            token_accuracy: correct as f64 / tokens as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    Ok((params, report))
}
