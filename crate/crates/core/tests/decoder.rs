use gat_core::config::{GeometryMode, GluPlacement, ModelConfig, PositionMode};
use gat_core::decode::Session;
use gat_core::encoder::RegionSet;
use gat_core::model::{caption_logits, forward_xent};
use gat_core::params::ModelParams;
use gat_core::tensor::Tensor;
use gat_core::vocab::BOS;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_regions(rng: &mut ChaCha8Rng, n: usize, d: usize) -> RegionSet {
    let feats: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let boxes: Vec<[f64; 4]> = (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..0.6);
            let y = rng.random_range(0.0..0.6);
            [x, y, x + rng.random_range(0.05..0.4), y + rng.random_range(0.05..0.4)]
        })
        .collect();
    RegionSet::from_boxes(Tensor::from_rows(&feats).unwrap(), &boxes).unwrap()
}

fn small(position: PositionMode, self_attn: bool, seed: u64) -> ModelConfig {
    ModelConfig {
        d_in: 6,
        d_model: 8,
        d_hidden: 6,
        d_word: 5,
        heads: 2,
        enc_layers: 1,
        dec_layers: 2,
        d_ff: 12,
        vocab_size: 11,
        t_max: 16,
        geometry: GeometryMode::Concat,
        position,
        glu: GluPlacement::EncDec,
        dec_self_attn: self_attn,
        seed,
        ..ModelConfig::default()
    }
}

fn decoder_kinds(seed: u64) -> Vec<ModelConfig> {
    vec![
        small(PositionMode::Lstm, false, seed),
        small(PositionMode::Sinusoidal, false, seed),
        small(PositionMode::Lstm, true, seed),
        small(PositionMode::Sinusoidal, true, seed),
    ]
}

fn bits(row: &[f64]) -> Vec<u64> {
    row.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn future_tokens_never_change_earlier_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..100 {
        let cfg = &decoder_kinds(trial)[trial as usize % 4];
        let params = ModelParams::init(cfg).unwrap();
        let n = rng.random_range(1..6);
        let regions = random_regions(&mut rng, n, cfg.d_in);
        let len = rng.random_range(2..10);
        let words: Vec<usize> = (0..len).map(|_| rng.random_range(3..cfg.vocab_size)).collect();
        let t = rng.random_range(0..len);
        let mut mutated = words.clone();
        for w in &mut mutated[t..] {
            *w = rng.random_range(3..cfg.vocab_size);
        }
        let a = caption_logits(&params, cfg, &regions, &words).unwrap();
        let b = caption_logits(&params, cfg, &regions, &mutated).unwrap();
        // row s consumes words[..s], so rows 0..=t see no mutated token
        for s in 0..=t {
            assert_eq!(bits(a.row_slice(s)), bits(b.row_slice(s)), "trial {trial} step {s}");
        }
    }
}

#[test]
fn incremental_steps_match_teacher_forcing() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for cfg in decoder_kinds(4) {
        let params = ModelParams::init(&cfg).unwrap();
        let regions = random_regions(&mut rng, 4, cfg.d_in);
        let words = [4, 7, 9, 5, 3];
        let full = caption_logits(&params, &cfg, &regions, &words).unwrap();
        let mut session = Session::new(&params, &cfg, &regions).unwrap();
        for s in 0..=words.len() {
            let mut prefix = vec![BOS];
            prefix.extend_from_slice(&words[..s]);
            let step = session.logits_after(&prefix).unwrap();
            for (x, y) in step.iter().zip(full.row_slice(s)) {
                assert!((x - y).abs() < 1e-12, "{cfg:?} step {s}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn zero_output_layer_gives_ln_v_per_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for cfg in decoder_kinds(2) {
        let mut params = ModelParams::init(&cfg).unwrap();
        for (name, t) in params.iter_mut() {
            if name.starts_with("out.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let regions = random_regions(&mut rng, 3, cfg.d_in);
        let other = random_regions(&mut rng, 2, cfg.d_in);
        let batch: Vec<(&RegionSet, &[usize])> = vec![(&regions, &[4, 5, 6]), (&other, &[3])];
        let loss = forward_xent(&batch, &params, &cfg).unwrap();
        assert!((loss - (cfg.vocab_size as f64).ln()).abs() < 1e-12, "{loss}");
    }
}

#[test]
fn single_region_cross_attention_is_its_value() {
    // With one region every attention row is [1], so the logits cannot
    // depend on the query weights.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = small(PositionMode::Lstm, false, 3);
    let params = ModelParams::init(&cfg).unwrap();
    let regions = random_regions(&mut rng, 1, cfg.d_in);
    let words = [4, 8];
    let base = caption_logits(&params, &cfg, &regions, &words).unwrap();
    let mut shifted = params.clone();
    for (name, t) in shifted.iter_mut() {
        if name.starts_with("dec.layer0.head") && name.ends_with("W_Q") {
            t.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        }
    }
    let again = caption_logits(&shifted, &cfg, &regions, &words).unwrap();
    assert!(base.max_abs_diff(&again) < 1e-12);
}

#[test]
fn logits_have_one_row_per_step_for_any_region_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cfg = small(PositionMode::Lstm, false, 1);
    let params = ModelParams::init(&cfg).unwrap();
    for n in 1..=8 {
        let regions = random_regions(&mut rng, n, cfg.d_in);
        let out = caption_logits(&params, &cfg, &regions, &[4, 5, 6]).unwrap();
        assert_eq!(out.shape(), [4, cfg.vocab_size]);
    }
}
