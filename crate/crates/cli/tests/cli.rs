use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gat_core::checkpoint::load_checkpoint;
use gat_core::dataset;
use gat_core::decode::greedy_decode;

fn gat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gat")).args(args).output().expect("runs gat")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let path = dir.join(name);
    let mut args = vec!["gen", "--out", s(&path)];
    args.extend_from_slice(extra);
    ok(&gat(&args));
    path
}

const MEMORIZE: &str = "\
# small model that can memorize ten scenes
d_model=16
d_hidden=16
d_word=8
heads=2
enc_layers=1
dec_layers=1
d_ff=32
epochs=50
batch_size=2
lr=0.01
decay_every=1000
";

/// Trains the memorization config on ten scenes; returns (data, checkpoint).
fn memorized(dir: &Path) -> (PathBuf, PathBuf) {
    let data = gen(dir, "ten.jsonl", &["--seed", "4", "--scenes", "10"]);
    // one reference per scene, so the captions themselves can be memorized
    let mut pairs = dataset::load(&data).unwrap();
    for p in &mut pairs {
        p.references.truncate(1);
    }
    dataset::save(&pairs, &data).unwrap();
    let config = dir.join("memorize.cfg");
    std::fs::write(&config, MEMORIZE).unwrap();
    let ckpt = dir.join("mem.ckpt");
    let out = gat(&["train", "--quiet", "--data", s(&data), "--config", s(&config), "--out-ckpt", s(&ckpt)]);
    ok(&out);
    (data, ckpt)
}

#[test]
fn gen_is_deterministic_and_counts_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.jsonl", &["--seed", "7", "--scenes", "100"]);
    let b = gen(dir.path(), "b.jsonl", &["--seed", "7", "--scenes", "100"]);
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), 100);
}

#[test]
fn gen_rejects_zero_scenes_and_bad_paths() {
    let dir = tempfile::tempdir().unwrap();
    let out = gat(&["gen", "--scenes", "0", "--out", s(&dir.path().join("x.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = gat(&["gen", "--scenes", "3", "--out", s(&dir.path().join("missing/dir/x.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = gat(&["gen", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn memorized_model_round_trips_through_eval_and_caption() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = memorized(dir.path());
    assert!(ckpt.exists());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("mem.report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 50);
    let last = &report["epochs"][49];
    assert!(last["mean_loss"].as_f64().unwrap() < 0.1);

    let json = dir.path().join("eval.json");
    ok(&gat(&["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--beam", "5", "--json", s(&json)]));
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    for key in ["beam", "scenes", "scores", "spatial_accuracy", "captions"] {
        assert!(eval.get(key).is_some(), "report lacks {key}");
    }
    for key in ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "CIDEr"] {
        assert!(eval["scores"][key].is_f64(), "report lacks score {key}");
    }
    assert_eq!(eval["scenes"], 10);
    assert!(eval["scores"]["BLEU-1"].as_f64().unwrap() >= 0.99, "{}", eval["scores"]);

    // beam 1 through the CLI equals greedy decoding through the library
    let greedy_json = dir.path().join("greedy.json");
    ok(&gat(&["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--beam", "1", "--json", s(&greedy_json)]));
    let greedy: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&greedy_json).unwrap()).unwrap();
    let ck = load_checkpoint(&ckpt).unwrap();
    let pairs = dataset::load(&data).unwrap();
    for (i, p) in pairs.iter().enumerate() {
        let ids = greedy_decode(&p.regions, &ck.params, &ck.config).unwrap();
        assert_eq!(greedy["captions"][i], ck.vocab.decode(&ids).join(" "));
    }

    let out = gat(&["caption", "--data", s(&data), "--ckpt", s(&ckpt), "--index", "3", "--beam", "1"]);
    ok(&out);
    let line = String::from_utf8(out.stdout).unwrap();
    assert_eq!(line.trim_end(), format!("3\t{}", greedy["captions"][3].as_str().unwrap()));
}

#[test]
fn vocabulary_mismatch_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "small.jsonl", &["--seed", "1", "--scenes", "3", "--no-reversed"]);
    let ckpt = dir.path().join("m.ckpt");
    ok(&gat(&["train", "--quiet", "--data", s(&data), "--epochs", "1", "--set", "d_model=8", "--set", "heads=2", "--out-ckpt", s(&ckpt)]));
    let other = gen(dir.path(), "other.jsonl", &["--seed", "2", "--scenes", "200"]);
    let out = gat(&["eval", "--data", s(&other), "--ckpt", s(&ckpt)]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary"));

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint at all").unwrap();
    let out = gat(&["eval", "--data", s(&data), "--ckpt", s(&junk)]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn geometry_off_flag_gives_the_base_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.jsonl", &["--seed", "5", "--scenes", "6"]);
    let ckpt = dir.path().join("base.ckpt");
    ok(&gat(&[
        "train", "--quiet", "--data", s(&data), "--epochs", "1", "--set", "d_model=8", "--set", "heads=2",
        "--mode-geometry", "off", "--mode-position", "sinusoidal", "--glu-placement", "none", "--out-ckpt", s(&ckpt),
    ]));
    let ck = load_checkpoint(&ckpt).unwrap();
    assert_eq!(ck.config.geometry.to_string(), "off");
    assert!(!ck.params.iter().any(|(n, _)| n.contains("W_QG") || n.starts_with("enc.geo") || n.contains("glu")));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.jsonl", &["--seed", "6", "--scenes", "4"]);
    let config = dir.path().join("c.cfg");
    std::fs::write(&config, "d_model=8\nheads=2\nmode_geometry=add\nseed=3\n").unwrap();
    let ckpt = dir.path().join("c.ckpt");
    ok(&gat(&[
        "train", "--quiet", "--data", s(&data), "--config", s(&config), "--mode-geometry", "concat", "--seed", "9",
        "--epochs", "1", "--out-ckpt", s(&ckpt),
    ]));
    let ck = load_checkpoint(&ckpt).unwrap();
    assert_eq!(ck.config.geometry.to_string(), "concat");
    assert_eq!(ck.config.seed, 9);
    assert_eq!(ck.config.d_model, 8);

    std::fs::write(&config, "no_such_key=1\n").unwrap();
    let out = gat(&["train", "--data", s(&data), "--config", s(&config), "--out-ckpt", s(&ckpt)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_blowup_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.jsonl", &["--seed", "8", "--scenes", "8"]);
    let ckpt = dir.path().join("nan.ckpt");
    let out = gat(&[
        "train", "--quiet", "--data", s(&data), "--set", "d_model=8", "--set", "heads=2", "--lr", "1e300",
        "--epochs", "3", "--out-ckpt", s(&ckpt),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite value in parameter"));
    assert!(!ckpt.exists());
}

#[test]
fn gradcheck_passes_and_names_an_injected_fault() {
    let out = gat(&["gradcheck", "--seed", "2"]);
    ok(&out);
    let out = gat(&["gradcheck", "--seed", "2", "--inject-fault", "softmax_rows"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("softmax_rows"));
}
