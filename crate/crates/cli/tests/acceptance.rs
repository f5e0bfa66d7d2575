//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line, then exits nonzero if any
//! failed.

use std::process::Command;
use std::time::Instant;

use gat_core::ablation::{
    check_ordering, component_variants, desk_model, desk_scenes, desk_training, markdown_table, run_ablation,
    AblationSettings, DESK_TEST_SEED, DESK_TRAIN_SEED,
};
use gat_core::checkpoint::{load_checkpoint, save_checkpoint};
use gat_core::config::{GeometryMode, GluPlacement, ModelConfig, PositionMode};
use gat_core::decode::{beam_decode, beam_search, greedy_decode, rank_hypotheses, score_caption, Hypothesis};
use gat_core::encoder::{encode, gsr_attention, RegionSet};
use gat_core::eval::{build_vocab, to_examples};
use gat_core::gradcheck::{run_suite, STEP, TOLERANCE};
use gat_core::layers::Dropout;
use gat_core::metrics::{bleu, cider, rouge_l, CIDER_SIGMA};
use gat_core::model::caption_logits;
use gat_core::params::{BoundModel, ModelParams};
use gat_core::scenes::generate;
use gat_core::tape::{OpKind, Tape};
use gat_core::tensor::Tensor;
use gat_core::train::{threads_from_env, train, TrainConfig};
use gat_core::vocab::{BOS, EOS, PAD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_regions(rng: &mut ChaCha8Rng, n: usize, d: usize) -> RegionSet {
    let feats: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let boxes: Vec<[f64; 4]> = (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..0.6);
            let y = rng.random_range(0.0..0.6);
            [x, y, x + rng.random_range(0.05..0.4), y + rng.random_range(0.05..0.4)]
        })
        .collect();
    RegionSet::from_boxes(Tensor::new(&[n, d], feats).unwrap(), &boxes).unwrap()
}

fn small(geometry: GeometryMode, position: PositionMode, glu: GluPlacement, seed: u64) -> ModelConfig {
    ModelConfig {
        d_in: 6,
        d_model: 8,
        d_hidden: 6,
        d_word: 4,
        heads: 2,
        enc_layers: 2,
        dec_layers: 2,
        d_ff: 12,
        vocab_size: 10,
        geometry,
        position,
        glu,
        seed,
        ..ModelConfig::default()
    }
}

fn bits(data: &[f64]) -> Vec<u64> {
    data.iter().map(|v| v.to_bits()).collect()
}

fn gradient_fidelity() -> Outcome {
    ensure(STEP == 1e-5 && TOLERANCE == 1e-4, || format!("step {STEP}, tolerance {TOLERANCE}"))?;
    let report = run_suite(0, None).map_err(|e| e.to_string())?;
    if let Some(bad) = report.failures().next() {
        return Err(format!("{} rel err {:.2e}", bad.name, bad.rel_err));
    }
    for kind in OpKind::ALL.into_iter().filter(|&k| k != OpKind::Leaf) {
        ensure(report.checks.iter().any(|c| c.name == kind.name()), || format!("no check for {}", kind.name()))?;
    }
    ensure(report.checks.iter().any(|c| c.name.starts_with("model")), || "no end-to-end check".into())?;
    ensure(report.seconds < 60.0, || format!("suite took {:.1}s", report.seconds))?;
    let worst = report.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(format!("{} checks, worst rel err {worst:.1e}, {:.1}s", report.checks.len(), report.seconds))
}

fn encoded(params: &ModelParams, cfg: &ModelConfig, regions: &RegionSet) -> Tensor {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, params, cfg).unwrap();
    let out = encode(&mut tape, regions, &bound.encoder, cfg.geometry, &mut Dropout::off()).unwrap();
    tape.value(out).clone()
}

fn encoder_equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let geometry = [GeometryMode::Concat, GeometryMode::Add, GeometryMode::Off][trial as usize % 3];
        let glu = if geometry == GeometryMode::Off { GluPlacement::None } else { GluPlacement::Enc };
        let cfg = small(geometry, PositionMode::Lstm, glu, trial);
        let params = ModelParams::init(&cfg).unwrap();
        let n = rng.random_range(1..=8);
        let regions = random_regions(&mut rng, n, cfg.d_in);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let a = encoded(&params, &cfg, &regions).permute_rows(&order).unwrap();
        let b = encoded(&params, &cfg, &regions.permuted(&order).unwrap());
        let d = a.max_abs_diff(&b);
        worst = worst.max(d);
        ensure(d <= 1e-9, || format!("trial {trial}: {d:.2e}"))?;
    }
    Ok(format!("100 region sets, max diff {worst:.1e}"))
}

fn decoder_causality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for trial in 0..100u64 {
        let position = if trial % 2 == 0 { PositionMode::Lstm } else { PositionMode::Sinusoidal };
        let cfg = ModelConfig {
            dec_self_attn: trial % 4 >= 2,
            ..small(GeometryMode::Concat, position, GluPlacement::EncDec, trial)
        };
        let params = ModelParams::init(&cfg).unwrap();
        let n = rng.random_range(1..6);
        let regions = random_regions(&mut rng, n, cfg.d_in);
        let len = rng.random_range(2..12);
        let words: Vec<usize> = (0..len).map(|_| rng.random_range(3..cfg.vocab_size)).collect();
        let t = rng.random_range(0..len);
        let mut mutated = words.clone();
        for w in &mut mutated[t..] {
            *w = rng.random_range(3..cfg.vocab_size);
        }
        let a = caption_logits(&params, &cfg, &regions, &words).unwrap();
        let b = caption_logits(&params, &cfg, &regions, &mutated).unwrap();
        for s in 0..=t {
            ensure(bits(a.row_slice(s)) == bits(b.row_slice(s)), || format!("trial {trial}, step {s}"))?;
        }
    }
    Ok("100 prefixes, earlier logits bit-identical".into())
}

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn vanilla_attention(q: &Mat, k: &Mat, v: &Mat, temp: f64) -> Mat {
    q.iter()
        .map(|qr| {
            let s: Vec<f64> = k.iter().map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / temp).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len()).map(|j| e.iter().zip(v).map(|(w, vr)| w / z * vr[j]).sum()).collect()
        })
        .collect()
}

fn vanilla_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0f64;
    for seed in 0..30 {
        let cfg = small(GeometryMode::Concat, PositionMode::Lstm, GluPlacement::None, seed);
        let params = ModelParams::init(&cfg).unwrap();
        let n = rng.random_range(1..=8);
        let x = Tensor::new(&[n, cfg.d_model], (0..n * cfg.d_model).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &params, &cfg).unwrap();
        let xv = tape.constant(x.clone());
        let zero = tape.constant(Tensor::zeros(&[n, cfg.d_model]));
        let out = gsr_attention(&mut tape, xv, Some(zero), &bound.encoder.layers[0], GeometryMode::Concat).unwrap();

        let xm = to_mat(&x);
        let w = |name: String| to_mat(params.get(&name).unwrap());
        let mut joined: Mat = vec![Vec::new(); n];
        for k in 0..cfg.heads {
            let q = matmul(&xm, &w(format!("enc.layer0.head{k}.W_QA")));
            let key = matmul(&xm, &w(format!("enc.layer0.head{k}.W_KA")));
            let v = matmul(&xm, &w(format!("enc.layer0.head{k}.W_VA")));
            let temp = (2.0 * cfg.d_head() as f64).sqrt();
            for (row, head) in joined.iter_mut().zip(vanilla_attention(&q, &key, &v, temp)) {
                row.extend(head);
            }
        }
        let want = matmul(&joined, &w("enc.layer0.W_O".into()));
        let d = want
            .iter()
            .flatten()
            .zip(tape.value(out.output).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(d);
        ensure(d <= 1e-10, || format!("seed {seed}: {d:.2e}"))?;
    }
    Ok(format!("30 layers, max diff {worst:.1e}"))
}

fn ablation_ordering() -> Outcome {
    let started = Instant::now();
    let train_set = generate(&desk_scenes(DESK_TRAIN_SEED, 2000)).map_err(|e| e.to_string())?;
    let test_set = generate(&desk_scenes(DESK_TEST_SEED, 400)).map_err(|e| e.to_string())?;
    let seeds = vec![0, 1, 2];
    let settings = AblationSettings {
        model: desk_model(),
        train: desk_training(),
        seeds: seeds.clone(),
        beam: 1,
        threads: threads_from_env(),
    };
    let rows = run_ablation(&train_set, &test_set, &component_variants(), &settings, &mut |r| {
        eprintln!("  {:<20} seed {}  spatial {:.3}  {:.0}s", r.variant, r.seed, r.spatial_accuracy, r.seconds);
    })
    .map_err(|e| e.to_string())?;
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    eprintln!("{}", markdown_table(&rows, &seeds));
    let check = check_ordering(&rows, &seeds);
    let summary = format!(
        "Full - Base {:+.1} points, Base+GSR between on {}/3, Base+position-LSTM between on {}/3, {minutes:.1} min",
        check.full_minus_base_points, check.gsr_between, check.lstm_between
    );
    ensure(check.passed && minutes <= 15.0, || summary.clone())?;
    Ok(summary)
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn one(cand: &str, refs: &[&str]) -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    (vec![toks(cand)], vec![refs.iter().map(|r| toks(r)).collect()])
}

fn metric_oracles() -> Outcome {
    let close = |name: &str, got: f64, want: f64| ensure((got - want).abs() <= 1e-9, || format!("{name}: {got} vs {want}"));
    let (c, r) = one("the cat sat on the mat", &["the cat sat on the mat"]);
    ensure(bleu(&c, &r, 4).corpus == 1.0, || "BLEU identity is not exactly 1".into())?;

    // BLEU
    let (c, r) = one("a a a", &["a b c"]);
    close("bleu clip", bleu(&c, &r, 1).corpus, 1.0 / 3.0)?;
    let (c, r) = one("a", &["a b c d"]);
    close("bleu brevity", bleu(&c, &r, 1).corpus, (-3.0f64).exp())?;
    let (c, r) = one("the the the the", &["the cat", "the the dog"]);
    close("bleu best reference", bleu(&c, &r, 1).corpus, 0.5)?;
    let (c, r) = one("a b c d", &["a b c e"]);
    close("bleu-3", bleu(&c, &r, 3).corpus, (0.75f64 * 2.0 / 3.0 * 0.5).cbrt())?;
    close("bleu-4 zero", bleu(&c, &r, 4).corpus, 0.0)?;
    let c = vec![toks("a b c"), toks("x y")];
    let r = vec![vec![toks("a b d")], vec![toks("x y")]];
    close("bleu pooled", bleu(&c, &r, 2).corpus, (0.8f64 * 2.0 / 3.0).sqrt())?;

    // ROUGE-L, beta = 1.2
    let f = |p: f64, rc: f64| 2.44 * p * rc / (rc + 1.44 * p);
    let (c, r) = one("a b c", &["a b c"]);
    close("rouge identity", rouge_l(&c, &r).corpus, 1.0)?;
    let (c, r) = one("a b", &["x y z"]);
    close("rouge disjoint", rouge_l(&c, &r).corpus, 0.0)?;
    let (c, r) = one("a b c d", &["a c b d"]);
    close("rouge swap", rouge_l(&c, &r).corpus, 0.75)?;
    let (c, r) = one("a b", &["a b c d"]);
    close("rouge short", rouge_l(&c, &r).corpus, f(1.0, 0.5))?;
    let (c, r) = one("a b c", &["a x x x x x", "c b a"]);
    close("rouge best reference", rouge_l(&c, &r).corpus, 1.0 / 3.0)?;

    // CIDEr-D
    let c = vec![toks("a b c d"), toks("x y z w")];
    let r = vec![vec![toks("a b c d")], vec![toks("x y z w")]];
    close("cider identity", cider(&c, &r, 4, CIDER_SIGMA).corpus, 10.0)?;
    let c = vec![toks("p q"), toks("x y")];
    let r = vec![vec![toks("a b")], vec![toks("x y")]];
    close("cider disjoint", cider(&c, &r, 4, CIDER_SIGMA).per_instance[0], 0.0)?;
    let c = vec![toks("a b"), toks("a d"), toks("e")];
    let r = vec![vec![toks("a b")], vec![toks("a c")], vec![toks("d e")]];
    let (ia, i1) = (1.5f64.ln(), 3.0f64.ln());
    let second = 10.0 * ia * ia / (ia * ia + i1 * i1);
    let third = 10.0 / 2f64.sqrt() * (-1.0f64 / 72.0).exp();
    close("cider toy corpus", cider(&c, &r, 1, CIDER_SIGMA).corpus, (10.0 + second + third) / 3.0)?;
    let c = vec![toks("a"), toks("c")];
    let r = vec![vec![toks("a"), toks("b")], vec![toks("c")]];
    close("cider reference mean", cider(&c, &r, 1, CIDER_SIGMA).corpus, 7.5)?;
    let c = vec![toks("a z"), toks("c")];
    let r = vec![vec![toks("a b")], vec![toks("c")]];
    close("cider unseen n-gram", cider(&c, &r, 1, CIDER_SIGMA).per_instance[0], 5.0)?;
    Ok("BLEU 6 cases + identity, ROUGE-L 5, CIDEr 5".into())
}

fn toy(vocab_size: usize, t_max: usize, position: PositionMode, seed: u64, scale: f64) -> (ModelConfig, ModelParams) {
    let cfg = ModelConfig {
        d_in: 5,
        d_model: 8,
        d_hidden: 6,
        d_word: 4,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        d_ff: 8,
        vocab_size,
        t_max,
        geometry: GeometryMode::Concat,
        position,
        glu: GluPlacement::Enc,
        seed,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::init(&cfg).unwrap();
    for (name, t) in params.iter_mut() {
        if name.starts_with("out.") {
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    (cfg, params)
}

fn beam_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for i in 0..200u64 {
        let position = if i % 2 == 0 { PositionMode::Lstm } else { PositionMode::Sinusoidal };
        let (cfg, params) = toy(12, 8, position, i, 1.0 + (i % 5) as f64);
        let n = rng.random_range(1..6);
        let regions = random_regions(&mut rng, n, cfg.d_in);
        let greedy = greedy_decode(&regions, &params, &cfg).unwrap();
        let beam = beam_decode(&regions, &params, &cfg, 1).unwrap();
        ensure(greedy == beam, || format!("beam 1 differs from greedy on instance {i}"))?;
    }
    for i in 0..50u64 {
        let (cfg, params) = toy(6, 4, PositionMode::Lstm, 1000 + i, 4.0);
        let n = rng.random_range(1..5);
        let regions = random_regions(&mut rng, n, cfg.d_in);
        let words: Vec<usize> = (0..cfg.vocab_size).filter(|&t| t != PAD && t != BOS && t != EOS).collect();
        let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
        let mut all: Vec<Hypothesis> = vec![score_caption(&regions, &params, &cfg, &[]).unwrap()];
        for _ in 0..cfg.t_max {
            frontier = frontier
                .iter()
                .flat_map(|s| words.iter().map(move |&w| [s.as_slice(), &[w]].concat()))
                .collect();
            all.extend(frontier.iter().map(|s| score_caption(&regions, &params, &cfg, s).unwrap()));
        }
        all.sort_by(rank_hypotheses);
        let best = &all[0];
        let found = beam_search(&regions, &params, &cfg, 5).unwrap();
        ensure(found.words == best.words, || {
            format!(
                "instance {i}: beam {:?} (score {:.4}) vs exhaustive {:?} (score {:.4}) over {} sequences",
                found.words,
                found.normalized(),
                best.words,
                best.normalized(),
                all.len()
            )
        })?;
    }
    Ok("200 greedy/beam-1 pairs identical, 50 beam-5 searches optimal".into())
}

fn persistence() -> Outcome {
    let pairs = generate(&desk_scenes(7, 16)).map_err(|e| e.to_string())?;
    let vocab = build_vocab(&pairs);
    let examples = to_examples(&pairs, &vocab);
    let cfg = ModelConfig {
        d_in: pairs[0].regions.feature_dim(),
        vocab_size: vocab.len(),
        ..small(GeometryMode::Concat, PositionMode::Lstm, GluPlacement::Enc, 5)
    };
    let tc = TrainConfig { epochs: 2, lr: 1e-2, ..TrainConfig::default() };
    let (params, _) = train(&examples, &cfg, &tc, &mut |_| {}).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&params, &cfg, &vocab, &a).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&a).map_err(|e| e.to_string())?;
    save_checkpoint(&loaded.params, &loaded.config, &loaded.vocab, &b).map_err(|e| e.to_string())?;
    let (ba, bb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    ensure(ba == bb, || "second save differs".into())?;
    for e in &examples {
        let x = caption_logits(&params, &cfg, &e.regions, &e.references[0]).unwrap();
        let y = caption_logits(&loaded.params, &loaded.config, &e.regions, &e.references[0]).unwrap();
        ensure(bits(x.data()) == bits(y.data()), || "loaded logits differ".into())?;
    }
    Ok(format!("{} byte checkpoint, logits equal on {} captions", ba.len(), examples.len()))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let gat = env!("CARGO_BIN_EXE_gat");
    let data = dir.path().join("scenes.jsonl");
    let status = Command::new(gat)
        .args(["gen", "--seed", "3", "--scenes", "40", "--out"])
        .arg(&data)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || format!("gen failed: {}", String::from_utf8_lossy(&status.stderr)))?;
    let mut bytes = Vec::new();
    for name in ["one.ckpt", "two.ckpt"] {
        let ckpt = dir.path().join(name);
        let out = Command::new(gat)
            .args(["train", "--quiet", "--seed", "11", "--epochs", "2", "--set", "d_model=16", "--set", "d_ff=32"])
            .arg("--data")
            .arg(&data)
            .arg("--out-ckpt")
            .arg(&ckpt)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || format!("train failed: {}", String::from_utf8_lossy(&out.stderr)))?;
        bytes.push(std::fs::read(&ckpt).map_err(|e| e.to_string())?);
    }
    ensure(bytes[0] == bytes[1], || "checkpoints differ".into())?;
    Ok(format!("two runs, identical {} byte checkpoints", bytes[0].len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("encoder permutation equivariance", encoder_equivariance),
        ("decoder causality", decoder_causality),
        ("vanilla reduction", vanilla_reduction),
        ("metric oracles", metric_oracles),
        ("beam correctness", beam_correctness),
        ("persistence", persistence),
        ("determinism", determinism),
        ("ablation ordering", ablation_ordering),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
