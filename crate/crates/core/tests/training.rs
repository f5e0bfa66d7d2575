use gat_core::config::{GeometryMode, GluPlacement, ModelConfig, PositionMode};
use gat_core::error::GatError;
use gat_core::eval::{build_vocab, to_examples};
use gat_core::model::forward_xent;
use gat_core::params::ModelParams;
use gat_core::scenes::{generate, GenerateParams};
use gat_core::train::{train, train_from, TrainConfig, TrainExample};

fn tiny_model(vocab_size: usize, d_in: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        d_in,
        d_model: 16,
        d_hidden: 16,
        d_word: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        d_ff: 32,
        vocab_size,
        geometry: GeometryMode::Concat,
        position: PositionMode::Lstm,
        glu: GluPlacement::Enc,
        seed,
        ..ModelConfig::default()
    }
}

fn scene_examples(n: usize, seed: u64) -> (Vec<TrainExample>, ModelConfig) {
    let pairs = generate(&GenerateParams {
        seed,
        n_scenes: n,
        feature_dim: 8,
        reversed_reference: false,
        ..GenerateParams::default()
    })
    .unwrap();
    let vocab = build_vocab(&pairs);
    let mut examples = to_examples(&pairs, &vocab);
    // one caption per scene so the set can be memorized exactly
    for e in &mut examples {
        e.references.truncate(1);
    }
    let cfg = tiny_model(vocab.len(), 8, 0);
    (examples, cfg)
}

#[test]
fn memorizes_ten_examples() {
    let (examples, cfg) = scene_examples(10, 5);
    let tc = TrainConfig {
        epochs: 50,
        batch_size: 2,
        lr: 1e-2,
        decay_every: 1000,
        ..TrainConfig::default()
    };
    let (_, report) = train(&examples, &cfg, &tc, &mut |_| {}).unwrap();
    let first = report.epochs.first().unwrap();
    let last = report.epochs.last().unwrap();
    assert!(last.mean_loss < first.mean_loss);
    assert!(last.mean_loss < 0.1, "final loss {}", last.mean_loss);
    assert!(last.token_accuracy >= 0.99, "token accuracy {}", last.token_accuracy);
}

#[test]
fn same_seed_gives_identical_parameters() {
    let (examples, cfg) = scene_examples(24, 6);
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 7,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let single = TrainConfig { threads: 1, ..tc.clone() };
    let many = TrainConfig { threads: 3, ..tc };
    let (a, ra) = train(&examples, &cfg, &single, &mut |_| {}).unwrap();
    let (b, rb) = train(&examples, &cfg, &many, &mut |_| {}).unwrap();
    for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
        assert_eq!(na, nb);
        let bits = |t: &gat_core::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(tb), "{na}");
    }
    for (ea, eb) in ra.epochs.iter().zip(&rb.epochs) {
        assert_eq!(ea.mean_loss.to_bits(), eb.mean_loss.to_bits());
    }
}

#[test]
fn batch_order_does_not_change_the_mean_loss() {
    let (examples, cfg) = scene_examples(9, 7);
    let params = ModelParams::init(&cfg).unwrap();
    let batch: Vec<_> = examples.iter().map(|e| (&e.regions, e.references[0].as_slice())).collect();
    let mut reversed = batch.clone();
    reversed.reverse();
    let a = forward_xent(&batch, &params, &cfg).unwrap();
    let b = forward_xent(&reversed, &params, &cfg).unwrap();
    assert!((a - b).abs() <= 1e-12);
}

#[test]
fn empty_batch_is_a_contract_error() {
    let (_, cfg) = scene_examples(2, 8);
    let params = ModelParams::init(&cfg).unwrap();
    assert!(matches!(forward_xent(&[], &params, &cfg), Err(GatError::Contract(_))));
}

#[test]
fn unk_only_reference_is_allowed() {
    let (examples, cfg) = scene_examples(2, 8);
    let params = ModelParams::init(&cfg).unwrap();
    let unk = [gat_core::vocab::UNK, gat_core::vocab::UNK];
    let loss = forward_xent(&[(&examples[0].regions, &unk)], &params, &cfg).unwrap();
    assert!(loss.is_finite() && loss >= 0.0);
}

#[test]
fn nan_parameter_aborts_with_its_name() {
    let (examples, cfg) = scene_examples(4, 9);
    let mut params = ModelParams::init(&cfg).unwrap();
    params.get_mut("dec.lstm.W_h").unwrap().data_mut()[3] = f64::NAN;
    let tc = TrainConfig { epochs: 1, ..TrainConfig::default() };
    match train_from(params, &examples, &cfg, &tc, &mut |_| {}) {
        Err(GatError::NumericalAbort { param, .. }) => assert_eq!(param, "dec.lstm.W_h"),
        other => panic!("expected an abort, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn default_schedule_at_epoch_seven() {
    assert!((TrainConfig::default().learning_rate(7) - 5e-4 * 0.8 * 0.8).abs() < 1e-18);
}
