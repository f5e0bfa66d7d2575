//! Component ablation: trains each variant under shared seeds and reports
//! spatial accuracy alongside caption metrics.

use serde::Serialize;

use crate::config::{GeometryMode, GluPlacement, ModelConfig, PositionMode};
use crate::error::Result;
use crate::eval::{build_vocab, evaluate, to_examples};
use crate::scenes::{CaptionPair, GenerateParams};
use crate::train::{train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Variant {
    pub name: String,
    pub geometry: GeometryMode,
    pub position: PositionMode,
    pub glu: GluPlacement,
}

impl Variant {
    pub fn new(name: &str, geometry: GeometryMode, position: PositionMode, glu: GluPlacement) -> Self {
        Variant {
            name: name.to_string(),
            geometry,
            position,
            glu,
        }
    }

    pub fn configure(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            geometry: self.geometry,
            position: self.position,
            glu: self.glu,
            ..base.clone()
        }
    }
}

pub const BASE: &str = "Base";
pub const BASE_GSR: &str = "Base+GSR";
pub const BASE_LSTM: &str = "Base+position-LSTM";
pub const FULL: &str = "Full: GAT";

/// Component rows: geometry-refined attention (with its gate) and the
/// position-LSTM, separately and together.
pub fn component_variants() -> Vec<Variant> {
    use GeometryMode::*;
    use PositionMode::*;
    vec![
        Variant::new(BASE, Off, Sinusoidal, GluPlacement::None),
        Variant::new(BASE_GSR, Concat, Sinusoidal, GluPlacement::Enc),
        Variant::new(BASE_LSTM, Off, Lstm, GluPlacement::None),
        Variant::new(FULL, Concat, Lstm, GluPlacement::Enc),
    ]
}

/// Strategy rows on the full model: how geometry is merged and where the gate sits.
pub fn strategy_variants() -> Vec<Variant> {
    use GeometryMode::*;
    use PositionMode::Lstm;
    vec![
        Variant::new("GSR add.", Add, Lstm, GluPlacement::Enc),
        Variant::new("GSR concat.", Concat, Lstm, GluPlacement::Enc),
        Variant::new("without GLU", Concat, Lstm, GluPlacement::None),
        Variant::new("GLU(enc.)", Concat, Lstm, GluPlacement::Enc),
        Variant::new("GLU(enc.+dec.)", Concat, Lstm, GluPlacement::EncDec),
    ]
}

/// Small model and schedule that keep a 12-run ablation within minutes on
/// one core.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        d_model: 64,
        d_hidden: 64,
        d_word: 16,
        heads: 2,
        enc_layers: 2,
        dec_layers: 1,
        d_ff: 128,
        ..ModelConfig::default()
    }
}

pub fn desk_training() -> TrainConfig {
    TrainConfig {
        epochs: 20,
        lr: 3e-3,
        decay_rate: 1.0,
        all_references: false,
        ..TrainConfig::default()
    }
}

/// Two objects per scene and two references per caption, so every caption
/// names the pair the relation is about.
pub fn desk_scenes(seed: u64, n_scenes: usize) -> GenerateParams {
    GenerateParams {
        seed,
        n_scenes,
        objects: (2, 2),
        reversed_reference: false,
        ..GenerateParams::default()
    }
}

/// Scene-generator seeds of the desk train and test splits.
pub const DESK_TRAIN_SEED: u64 = 1;
pub const DESK_TEST_SEED: u64 = 2;

#[derive(Clone, Debug)]
pub struct AblationSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub beam: usize,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub spatial_accuracy: f64,
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub final_loss: f64,
    pub seconds: f64,
}

/// Trains and evaluates every variant for every seed, in that order.
pub fn run_ablation(
    train_set: &[CaptionPair],
    test_set: &[CaptionPair],
    variants: &[Variant],
    settings: &AblationSettings,
    progress: &mut dyn FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let vocab = build_vocab(train_set);
    let examples = to_examples(train_set, &vocab);
    let d_in = train_set[0].regions.feature_dim();
    let mut tc = settings.train.clone();
    tc.threads = settings.threads;
    let mut rows = Vec::new();
    for variant in variants {
        for &seed in &settings.seeds {
            let started = std::time::Instant::now();
            let cfg = ModelConfig {
                d_in,
                vocab_size: vocab.len(),
                seed,
                ..variant.configure(&settings.model)
            };
            let (params, report) = train(&examples, &cfg, &tc, &mut |_| {})?;
            let eval = evaluate(test_set, &params, &cfg, &vocab, settings.beam, settings.threads)?;
            let row = AblationRow {
                variant: variant.name.clone(),
                seed,
                spatial_accuracy: eval.spatial_accuracy.unwrap_or(f64::NAN),
                bleu1: eval.score("BLEU-1").unwrap_or(0.0),
                bleu4: eval.score("BLEU-4").unwrap_or(0.0),
                rouge_l: eval.score("ROUGE-L").unwrap_or(0.0),
                cider: eval.score("CIDEr").unwrap_or(0.0),
                final_loss: report.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
                seconds: started.elapsed().as_secs_f64(),
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Mean of a column for one variant.
pub fn variant_mean(rows: &[AblationRow], variant: &str, f: impl Fn(&AblationRow) -> f64) -> f64 {
    let vals: Vec<f64> = rows.iter().filter(|r| r.variant == variant).map(f).collect();
    vals.iter().sum::<f64>() / vals.len().max(1) as f64
}

/// Spatial accuracy of `variant` under `seed`.
pub fn accuracy_at(rows: &[AblationRow], variant: &str, seed: u64) -> Option<f64> {
    rows.iter()
        .find(|r| r.variant == variant && r.seed == seed)
        .map(|r| r.spatial_accuracy)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderingCheck {
    /// Mean spatial accuracy of Full minus Base, in points.
    pub full_minus_base_points: f64,
    /// Seeds on which each middle variant lies strictly between Base and Full.
    pub gsr_between: usize,
    pub lstm_between: usize,
    pub seeds: usize,
    pub passed: bool,
}

/// Full beats Base by at least 10 points on average, and each single
/// component lies strictly between them on at least two thirds of seeds.
pub fn check_ordering(rows: &[AblationRow], seeds: &[u64]) -> OrderingCheck {
    let acc = |v: &str| variant_mean(rows, v, |r| r.spatial_accuracy);
    let gap = 100.0 * (acc(FULL) - acc(BASE));
    let between = |v: &str| {
        seeds
            .iter()
            .filter(|&&s| {
                match (accuracy_at(rows, BASE, s), accuracy_at(rows, v, s), accuracy_at(rows, FULL, s)) {
                    (Some(b), Some(m), Some(f)) => b < m && m < f,
                    _ => false,
                }
            })
            .count()
    };
    let (gsr, lstm) = (between(BASE_GSR), between(BASE_LSTM));
    let need = (2 * seeds.len()).div_ceil(3);
    OrderingCheck {
        full_minus_base_points: gap,
        gsr_between: gsr,
        lstm_between: lstm,
        seeds: seeds.len(),
        passed: gap >= 10.0 && gsr >= need && lstm >= need,
    }
}

/// One row per variant: per-seed spatial accuracy, then means.
pub fn markdown_table(rows: &[AblationRow], seeds: &[u64]) -> String {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    let mut out = String::from("| Model |");
    for s in seeds {
        out.push_str(&format!(" spatial (seed {s}) |"));
    }
    out.push_str(" spatial (mean) | BLEU-1 | BLEU-4 | ROUGE-L | CIDEr |\n|---|");
    out.push_str(&"---:|".repeat(seeds.len() + 5));
    out.push('\n');
    for name in names {
        out.push_str(&format!("| {name} |"));
        for &s in seeds {
            match accuracy_at(rows, name, s) {
                Some(a) => out.push_str(&format!(" {:.1} |", 100.0 * a)),
                None => out.push_str(" - |"),
            }
        }
        let m = |f: fn(&AblationRow) -> f64| variant_mean(rows, name, f);
        out.push_str(&format!(
            " {:.1} | {:.1} | {:.1} | {:.1} | {:.1} |\n",
            100.0 * m(|r| r.spatial_accuracy),
            100.0 * m(|r| r.bleu1),
            100.0 * m(|r| r.bleu4),
            100.0 * m(|r| r.rouge_l),
            100.0 * m(|r| r.cider),
        ));
    }
    out
}
