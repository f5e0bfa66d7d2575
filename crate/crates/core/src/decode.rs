//! Greedy and beam-search caption generation.

use std::cmp::Ordering;

use crate::config::ModelConfig;
use crate::decoder::{step_logits, DecoderState, Memory};
use crate::encoder::RegionSet;
use crate::error::Result;
use crate::layers::Dropout;
use crate::model::encode_memory;
use crate::params::{BoundModel, ModelParams};
use crate::tape::Tape;
use crate::vocab::{BOS, EOS, PAD};

/// An encoded image ready for step-by-step decoding.
pub struct Session {
    tape: Tape,
    bound: BoundModel,
    memory: Memory,
    /// Tape length after encoding; steps beyond it are discarded.
    base: usize,
    pub t_max: usize,
    d_hidden: usize,
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// PAD and BOS are never generated.
fn generable(token: usize) -> bool {
    token != PAD && token != BOS
}

impl Session {
    pub fn new(params: &ModelParams, cfg: &ModelConfig, regions: &RegionSet) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, params, cfg)?;
        let memory = encode_memory(&mut tape, &bound, regions, cfg, &mut Dropout::off())?;
        let base = tape.len();
        Ok(Session {
            tape,
            bound,
            memory,
            base,
            t_max: cfg.t_max,
            d_hidden: cfg.d_hidden,
        })
    }

    pub fn initial_state(&self) -> DecoderState {
        DecoderState::initial(self.d_hidden)
    }

    /// Consumes `token` and returns next-token log-probabilities.
    pub fn step(&mut self, state: &DecoderState, token: usize) -> Result<(Vec<f64>, DecoderState)> {
        let (logits, next) = step_logits(&mut self.tape, &self.memory, state, token, &self.bound.decoder)?;
        let logp = log_softmax(self.tape.value(logits).data());
        self.tape.truncate(self.base);
        Ok((logp, next))
    }

    /// Next-token logits after consuming `prefix` (BOS first).
    pub fn logits_after(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut state = self.initial_state();
        let mut out = Vec::new();
        for &tok in prefix {
            let (logits, next) = step_logits(&mut self.tape, &self.memory, &state, tok, &self.bound.decoder)?;
            out = self.tape.value(logits).data().to_vec();
            self.tape.truncate(self.base);
            state = next;
        }
        Ok(out)
    }
}

/// Argmax decoding; ties go to the lowest token id. Stops at EOS (not
/// included in the output) or after `t_max` words.
pub fn greedy_decode(regions: &RegionSet, params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<usize>> {
    let mut session = Session::new(params, cfg, regions)?;
    let mut state = session.initial_state();
    let mut last = BOS;
    let mut words = Vec::new();
    let mut total = 0.0;
    while words.len() < cfg.t_max {
        let (logp, next) = session.step(&state, last)?;
        // Compares running totals so that beam width 1 reproduces this exactly.
        let mut best = None::<(usize, f64)>;
        for (tok, &lp) in logp.iter().enumerate() {
            let score = total + lp;
            if generable(tok) && best.is_none_or(|(_, s)| score > s) {
                best = Some((tok, score));
            }
        }
        let (best, score) = best.expect("vocabulary has a generable token");
        if best == EOS {
            break;
        }
        words.push(best);
        total = score;
        state = next;
        last = best;
    }
    Ok(words)
}

/// A finished beam-search hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub words: Vec<usize>,
    /// Sum of log-probabilities of every scored token, EOS included.
    pub log_prob: f64,
    /// Number of scored tokens.
    pub steps: usize,
}

impl Hypothesis {
    pub fn normalized(&self) -> f64 {
        self.log_prob / self.steps as f64
    }
}

/// Higher normalized score first, then lexicographically smaller words.
pub fn rank_hypotheses(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.normalized()
        .total_cmp(&a.normalized())
        .then_with(|| a.words.cmp(&b.words))
}

struct Live {
    words: Vec<usize>,
    log_prob: f64,
    state: DecoderState,
}

/// Beam search returning the best finished hypothesis.
///
/// Each step expands every live hypothesis by every generable token and
/// keeps the `beam` best candidates by total log-probability (ties by word
/// sequence). Candidates ending in EOS move to the finished pool; live ones
/// reaching `t_max` words are finished without EOS.
pub fn beam_search(
    regions: &RegionSet,
    params: &ModelParams,
    cfg: &ModelConfig,
    beam: usize,
) -> Result<Hypothesis> {
    let beam = beam.max(1);
    let mut session = Session::new(params, cfg, regions)?;
    let mut live = vec![Live {
        words: Vec::new(),
        log_prob: 0.0,
        state: session.initial_state(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() {
        struct Cand {
            parent: usize,
            token: usize,
            log_prob: f64,
        }
        let mut cands = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (i, hyp) in live.iter().enumerate() {
            let last = hyp.words.last().copied().unwrap_or(BOS);
            let (logp, next) = session.step(&hyp.state, last)?;
            next_states.push(next);
            for (tok, &lp) in logp.iter().enumerate() {
                if generable(tok) {
                    cands.push(Cand {
                        parent: i,
                        token: tok,
                        log_prob: hyp.log_prob + lp,
                    });
                }
            }
        }
        let seq_cmp = |a: &Cand, b: &Cand| {
            let wa = live[a.parent].words.iter().chain([&a.token]);
            let wb = live[b.parent].words.iter().chain([&b.token]);
            wa.cmp(wb)
        };
        cands.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then_with(|| seq_cmp(a, b)));
        cands.truncate(beam);

        let mut next_live = Vec::with_capacity(beam);
        for c in cands {
            let parent = &live[c.parent];
            let steps = parent.words.len() + 1;
            if c.token == EOS {
                finished.push(Hypothesis {
                    words: parent.words.clone(),
                    log_prob: c.log_prob,
                    steps,
                });
                continue;
            }
            let mut words = parent.words.clone();
            words.push(c.token);
            if words.len() >= cfg.t_max {
                finished.push(Hypothesis {
                    words,
                    log_prob: c.log_prob,
                    steps,
                });
            } else {
                next_live.push(Live {
                    words,
                    log_prob: c.log_prob,
                    state: next_states[c.parent].clone(),
                });
            }
        }
        live = next_live;
    }
    finished.sort_by(rank_hypotheses);
    Ok(finished.swap_remove(0))
}

pub fn beam_decode(regions: &RegionSet, params: &ModelParams, cfg: &ModelConfig, beam: usize) -> Result<Vec<usize>> {
    Ok(beam_search(regions, params, cfg, beam)?.words)
}

/// Score of a given caption under the model, with the same convention as
/// beam search: EOS is scored unless the caption has `t_max` words.
pub fn score_caption(
    regions: &RegionSet,
    params: &ModelParams,
    cfg: &ModelConfig,
    words: &[usize],
) -> Result<Hypothesis> {
    let mut session = Session::new(params, cfg, regions)?;
    let mut state = session.initial_state();
    let mut log_prob = 0.0;
    let mut last = BOS;
    let mut steps = 0;
    for (i, &w) in words.iter().chain([&EOS]).enumerate() {
        if i == cfg.t_max {
            break;
        }
        let (logp, next) = session.step(&state, last)?;
        log_prob += logp[w];
        steps += 1;
        state = next;
        last = w;
    }
    Ok(Hypothesis {
        words: words.to_vec(),
        log_prob,
        steps,
    })
}
