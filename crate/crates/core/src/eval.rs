//! Dataset preparation and caption evaluation.

use serde::Serialize;

use crate::config::ModelConfig;
use crate::decode::beam_decode;
use crate::error::{GatError, Result};
use crate::metrics::{caption_scores, CorpusScore};
use crate::parallel::parallel_map;
use crate::params::ModelParams;
use crate::scenes::{spatial_accuracy, CaptionPair, SceneSpec};
use crate::train::TrainExample;
use crate::vocab::Vocabulary;

/// Vocabulary over every reference word, in first-seen order.
pub fn build_vocab(pairs: &[CaptionPair]) -> Vocabulary {
    Vocabulary::build(
        pairs
            .iter()
            .flat_map(|p| p.references.iter().flatten().map(String::as_str)),
    )
}

/// Words the vocabulary lacks, sorted and deduplicated.
pub fn unknown_words(pairs: &[CaptionPair], vocab: &Vocabulary) -> Vec<String> {
    let mut out: Vec<String> = pairs
        .iter()
        .flat_map(|p| p.references.iter().flatten())
        .filter(|w| vocab.id(w).is_none())
        .cloned()
        .collect();
    out.sort();
    out.dedup();
    out
}

pub fn to_examples(pairs: &[CaptionPair], vocab: &Vocabulary) -> Vec<TrainExample> {
    pairs
        .iter()
        .map(|p| TrainExample {
            regions: p.regions.clone(),
            references: p.references.iter().map(|r| vocab.encode(r)).collect(),
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub scores: Vec<CorpusScore>,
    /// Present when every scene carries object labels.
    pub spatial_accuracy: Option<f64>,
    pub captions: Vec<Vec<String>>,
}

impl EvalReport {
    pub fn score(&self, name: &str) -> Option<f64> {
        self.scores.iter().find(|s| s.name == name).map(|s| s.corpus)
    }
}

/// Decodes every scene (greedy when `beam == 1`) and scores the captions.
pub fn evaluate(
    pairs: &[CaptionPair],
    params: &ModelParams,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    beam: usize,
    threads: usize,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(GatError::Contract("nothing to evaluate".into()));
    }
    let decoded = parallel_map(pairs, threads, |_, p| beam_decode(&p.regions, params, cfg, beam));
    let captions = decoded
        .into_iter()
        .map(|r| r.map(|ids| vocab.decode(&ids)))
        .collect::<Result<Vec<_>>>()?;
    let references: Vec<Vec<Vec<String>>> = pairs.iter().map(|p| p.references.clone()).collect();
    let scores = caption_scores(&captions, &references);
    let scenes: Option<Vec<SceneSpec>> = pairs.iter().map(|p| p.scene.clone()).collect();
    Ok(EvalReport {
        spatial_accuracy: scenes.map(|s| spatial_accuracy(&captions, &s)),
        scores,
        captions,
    })
}
