//! End-to-end captioning forward pass and teacher-forced cross-entropy.

use crate::config::ModelConfig;
use crate::decoder::{prepare_memory, teacher_forced_logits, Memory};
use crate::encoder::{encode, RegionSet};
use crate::error::{GatError, Result};
use crate::layers::Dropout;
use crate::params::{BoundModel, ModelParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS, PAD};

/// Decoder inputs `[BOS] + words` and targets `words + [EOS]`, with the
/// words truncated so that neither exceeds `t_max + 1` steps.
pub fn sequence_io(words: &[usize], t_max: usize) -> (Vec<usize>, Vec<usize>) {
    let words = &words[..words.len().min(t_max)];
    let mut inputs = Vec::with_capacity(words.len() + 1);
    inputs.push(BOS);
    inputs.extend_from_slice(words);
    let mut targets = words.to_vec();
    targets.push(EOS);
    (inputs, targets)
}

/// Encodes the regions on `tape` and prepares decoder keys and values.
pub fn encode_memory(
    tape: &mut Tape,
    bound: &BoundModel,
    regions: &RegionSet,
    cfg: &ModelConfig,
    dropout: &mut Dropout,
) -> Result<Memory> {
    if regions.feature_dim() != cfg.d_in {
        return Err(GatError::Config(format!(
            "region features have width {}, model expects {}",
            regions.feature_dim(),
            cfg.d_in
        )));
    }
    let x_r = encode(tape, regions, &bound.encoder, cfg.geometry, dropout)?;
    prepare_memory(tape, x_r, &bound.decoder)
}

/// Teacher-forced results for one caption.
pub struct SequenceLoss {
    /// Summed negative log-likelihood over non-PAD targets.
    pub nll: Var,
    pub logits: Var,
    pub tokens: usize,
    /// Targets whose logit is the row maximum (ties to the lowest id).
    pub correct: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn sequence_loss(
    tape: &mut Tape,
    bound: &BoundModel,
    regions: &RegionSet,
    words: &[usize],
    cfg: &ModelConfig,
    dropout: &mut Dropout,
) -> Result<SequenceLoss> {
    if let Some(&bad) = words.iter().find(|&&w| w >= cfg.vocab_size) {
        return Err(GatError::Contract(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let memory = encode_memory(tape, bound, regions, cfg, dropout)?;
    let (inputs, targets) = sequence_io(words, cfg.t_max);
    let logits = teacher_forced_logits(tape, &memory, &inputs, &bound.decoder, dropout)?;
    let logp = tape.log_softmax_rows(logits)?;
    let picks: Vec<(usize, usize)> = targets
        .iter()
        .enumerate()
        .filter(|(_, &y)| y != PAD)
        .map(|(t, &y)| (t, y))
        .collect();
    let total = tape.select_sum(logp, &picks)?;
    let nll = tape.scale(total, -1.0)?;
    let values = tape.value(logits);
    let correct = picks
        .iter()
        .filter(|&&(t, y)| argmax(values.row_slice(t)) == y)
        .count();
    Ok(SequenceLoss {
        nll,
        logits,
        tokens: picks.len(),
        correct,
    })
}

/// Teacher-forced logits (`T × V`) for one caption.
pub fn caption_logits(
    params: &ModelParams,
    cfg: &ModelConfig,
    regions: &RegionSet,
    words: &[usize],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, params, cfg)?;
    let out = sequence_loss(&mut tape, &bound, regions, words, cfg, &mut Dropout::off())?;
    Ok(tape.value(out.logits).clone())
}

/// Outcome of a forward/backward pass over one or more captions.
pub struct ExampleGrad {
    pub nll: f64,
    pub tokens: usize,
    pub correct: usize,
    /// Gradient of the summed NLL, keyed like the parameters.
    pub grads: Option<ModelParams>,
}

pub fn example_pass(
    params: &ModelParams,
    cfg: &ModelConfig,
    regions: &RegionSet,
    words: &[usize],
    dropout: &mut Dropout,
    with_grad: bool,
) -> Result<ExampleGrad> {
    group_pass(params, cfg, &[(regions, words)], std::slice::from_mut(dropout), with_grad)
}

/// Several captions on one tape: the parameters are bound once and their
/// gradients accumulate across captions during a single backward pass.
/// `dropouts[i]` drives caption `i`.
pub fn group_pass(
    params: &ModelParams,
    cfg: &ModelConfig,
    items: &[(&RegionSet, &[usize])],
    dropouts: &mut [Dropout],
    with_grad: bool,
) -> Result<ExampleGrad> {
    if items.is_empty() || items.len() != dropouts.len() {
        return Err(GatError::Contract("need one dropout per caption and at least one caption".into()));
    }
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, params, cfg)?;
    let (mut nll, mut tokens, mut correct) = (0.0, 0, 0);
    let mut total: Option<Var> = None;
    for (&(regions, words), dropout) in items.iter().zip(dropouts.iter_mut()) {
        let out = sequence_loss(&mut tape, &bound, regions, words, cfg, dropout)?;
        nll += tape.value(out.nll).item();
        tokens += out.tokens;
        correct += out.correct;
        total = Some(match total {
            None => out.nll,
            Some(t) => tape.add(t, out.nll)?,
        });
    }
    let grads = match (with_grad, total) {
        (true, Some(total)) => {
            let mut g = tape.backward(total)?;
            let mut grads = ModelParams::default();
            for (name, var) in bound.vars() {
                grads.insert(name.clone(), g.take_or_zeros(var, &tape));
            }
            Some(grads)
        }
        _ => None,
    };
    Ok(ExampleGrad {
        nll,
        tokens,
        correct,
        grads,
    })
}

/// Mean teacher-forced cross-entropy per non-PAD target over the batch.
pub fn forward_xent(batch: &[(&RegionSet, &[usize])], params: &ModelParams, cfg: &ModelConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(GatError::Contract("empty batch".into()));
    }
    let mut nll = 0.0;
    let mut tokens = 0;
    for (regions, words) in batch {
        let r = example_pass(params, cfg, regions, words, &mut Dropout::off(), false)?;
        nll += r.nll;
        tokens += r.tokens;
    }
    Ok(nll / tokens as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_io_truncates_and_wraps() {
        assert_eq!(sequence_io(&[5, 6], 16), (vec![BOS, 5, 6], vec![5, 6, EOS]));
        let long: Vec<usize> = (4..24).collect();
        let (i, t) = sequence_io(&long, 16);
        assert_eq!(i.len(), 17);
        assert_eq!(t.len(), 17);
        assert_eq!(t[16], EOS);
    }
}
