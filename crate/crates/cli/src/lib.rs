//! Command implementations behind the `gat` binary.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gat_core::ablation::{
    check_ordering, component_variants, desk_model, desk_scenes, desk_training, markdown_table, run_ablation,
    strategy_variants, variant_mean, AblationRow, AblationSettings, DESK_TEST_SEED, DESK_TRAIN_SEED,
};
use gat_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use gat_core::config::{parse_kv, GeometryMode, GluPlacement, ModelConfig, PositionMode};
use gat_core::dataset::{self, DatasetError};
use gat_core::decode::beam_decode;
use gat_core::error::GatError;
use gat_core::eval::{build_vocab, evaluate, to_examples, unknown_words, EvalReport};
use gat_core::gradcheck::run_suite;
use gat_core::scenes::{generate, CaptionPair, GenerateParams};
use gat_core::tape::OpKind;
use gat_core::train::{threads_from_env, train, TrainConfig};
use serde_json::json;

pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError { code: EXIT_USAGE, message: message.into() }
    }

    fn mismatch(message: impl Into<String>) -> Self {
        CliError { code: EXIT_MISMATCH, message: message.into() }
    }

    fn check(message: impl Into<String>) -> Self {
        CliError { code: EXIT_CHECK_FAILED, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<GatError> for CliError {
    fn from(e: GatError) -> Self {
        let code = match &e {
            GatError::NumericalAbort { .. } => EXIT_NUMERICAL,
            GatError::Checkpoint(_) => EXIT_MISMATCH,
            _ => EXIT_USAGE,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(io) => CliError::usage(io.to_string()),
            other => CliError::mismatch(other.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::usage(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "gat", version, about = "Geometry attention transformer captioner on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene dataset as JSON lines.
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus a JSON training report.
    Train(TrainArgs),
    /// Decode a dataset and report caption metrics.
    Eval(EvalArgs),
    /// Print captions for scenes of a dataset.
    Caption(CaptionArgs),
    /// Train and compare the ablation variants under shared seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of every op and the full model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub scenes: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 3)]
    pub max_objects: usize,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Skip the third reference that names the object first.
    #[arg(long)]
    pub no_reversed: bool,
}

#[derive(Args, Clone, Debug)]
pub struct ModelFlags {
    /// key=value file with model and training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode_geometry: Option<GeometryMode>,
    #[arg(long)]
    pub mode_position: Option<PositionMode>,
    #[arg(long)]
    pub glu_placement: Option<GluPlacement>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Extra key=value settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Start from the desk-scale ablation model and schedule (always on for `ablate`).
    #[arg(long)]
    pub desk: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_ckpt: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CaptionArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    /// Caption only this scene.
    #[arg(long)]
    pub index: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Training scenes; generated at desk scale when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Test scenes; generated at desk scale when absent.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long, value_enum, default_value_t = Tables::Components)]
    pub tables: Tables,
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tables {
    /// Base, Base+GSR, Base+position-LSTM, Full.
    Components,
    /// add/concat merging and GLU placement on the full model.
    Strategies,
    All,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupts the backward pass of one op (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Caption(a) => cmd_caption(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

pub fn cmd_gen(a: &GenArgs) -> Result<()> {
    if a.scenes == 0 {
        return Err(CliError::usage("--scenes must be at least 1"));
    }
    let params = GenerateParams {
        seed: a.seed,
        n_scenes: a.scenes,
        objects: (a.min_objects, a.max_objects),
        feature_dim: a.feature_dim,
        noise_sigma: a.noise,
        reversed_reference: !a.no_reversed,
    };
    let pairs = generate(&params)?;
    dataset::save(&pairs, &a.out)?;
    println!("{} scenes, vocabulary of {} tokens", pairs.len(), build_vocab(&pairs).len());
    Ok(())
}

fn load_data(path: &Path) -> Result<Vec<CaptionPair>> {
    let pairs = dataset::load(path)?;
    if pairs.is_empty() {
        return Err(CliError::usage(format!("{} holds no scenes", path.display())));
    }
    Ok(pairs)
}

/// Defaults, then the config file, then `--set`, then the named flags.
pub fn resolve_config(flags: &ModelFlags) -> Result<(ModelConfig, TrainConfig)> {
    let (mut cfg, mut tc) = if flags.desk {
        (desk_model(), desk_training())
    } else {
        (ModelConfig::default(), TrainConfig::default())
    };
    let mut pairs = Vec::new();
    if let Some(path) = &flags.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        pairs.extend(parse_kv(&text)?);
    }
    for kv in &flags.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    for (k, v) in pairs {
        if !cfg.apply(&k, &v)? && !tc.apply(&k, &v)? {
            return Err(CliError::usage(format!("unknown setting {k:?}")));
        }
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(m) = flags.mode_geometry {
        cfg.geometry = m;
    }
    if let Some(m) = flags.mode_position {
        cfg.position = m;
    }
    if let Some(g) = flags.glu_placement {
        cfg.glu = g;
    }
    if let Some(e) = flags.epochs {
        tc.epochs = e;
    }
    if let Some(lr) = flags.lr {
        tc.lr = lr;
    }
    if let Some(b) = flags.batch_size {
        tc.batch_size = b;
    }
    tc.threads = threads_from_env();
    Ok((cfg, tc))
}

/// `model.ckpt` → `model.report.json`
pub fn report_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("report.json")
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let (mut cfg, tc) = resolve_config(&a.model)?;
    let pairs = load_data(&a.data)?;
    let vocab = build_vocab(&pairs);
    cfg.d_in = pairs[0].regions.feature_dim();
    cfg.vocab_size = vocab.len();
    cfg.validate()?;
    tc.validate()?;
    let examples = to_examples(&pairs, &vocab);
    let quiet = a.quiet;
    let (params, report) = train(&examples, &cfg, &tc, &mut |e| {
        if !quiet {
            println!(
                "epoch {:>3}  lr {:.2e}  loss {:.4}  token acc {:.3}  {:.1}s",
                e.epoch, e.lr, e.mean_loss, e.token_accuracy, e.seconds
            );
        }
    })?;
    save_checkpoint(&params, &cfg, &vocab, &a.out_ckpt)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(report_path(&a.out_ckpt), json + "\n")?;
    println!("wrote {} ({} parameters)", a.out_ckpt.display(), params.scalar_count());
    Ok(())
}

/// Loads a checkpoint and checks that `pairs` fit it.
fn load_matching(ckpt: &Path, pairs: &[CaptionPair]) -> Result<Checkpoint> {
    let ck = load_checkpoint(ckpt)?;
    let unknown = unknown_words(pairs, &ck.vocab);
    if !unknown.is_empty() {
        return Err(CliError::mismatch(format!(
            "dataset words missing from the checkpoint vocabulary: {}",
            unknown.join(", ")
        )));
    }
    if let Some(p) = pairs.iter().find(|p| p.regions.feature_dim() != ck.config.d_in) {
        return Err(CliError::mismatch(format!(
            "dataset features have width {}, checkpoint expects {}",
            p.regions.feature_dim(),
            ck.config.d_in
        )));
    }
    Ok(ck)
}

pub fn eval_report_json(report: &EvalReport, beam: usize) -> serde_json::Value {
    let scores: serde_json::Map<String, serde_json::Value> =
        report.scores.iter().map(|s| (s.name.clone(), json!(s.corpus))).collect();
    json!({
        "beam": beam,
        "scenes": report.captions.len(),
        "scores": scores,
        "spatial_accuracy": report.spatial_accuracy,
        "captions": report.captions.iter().map(|c| c.join(" ")).collect::<Vec<_>>(),
    })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if a.beam == 0 {
        return Err(CliError::usage("--beam must be at least 1"));
    }
    let pairs = load_data(&a.data)?;
    let ck = load_matching(&a.ckpt, &pairs)?;
    let report = evaluate(&pairs, &ck.params, &ck.config, &ck.vocab, a.beam, threads_from_env())?;
    println!("| metric | value |\n|---|---:|");
    for s in &report.scores {
        println!("| {} | {:.4} |", s.name, s.corpus);
    }
    if let Some(acc) = report.spatial_accuracy {
        println!("| spatial accuracy | {acc:.4} |");
    }
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&eval_report_json(&report, a.beam)).expect("json");
        std::fs::write(path, text + "\n")?;
    }
    Ok(())
}

pub fn cmd_caption(a: &CaptionArgs) -> Result<()> {
    if a.beam == 0 {
        return Err(CliError::usage("--beam must be at least 1"));
    }
    let pairs = load_data(&a.data)?;
    let ck = load_matching(&a.ckpt, &pairs)?;
    let indices: Vec<usize> = match a.index {
        Some(i) if i >= pairs.len() => {
            return Err(CliError::usage(format!("--index {i} out of range ({} scenes)", pairs.len())))
        }
        Some(i) => vec![i],
        None => (0..pairs.len()).collect(),
    };
    for i in indices {
        let ids = beam_decode(&pairs[i].regions, &ck.params, &ck.config, a.beam)?;
        println!("{i}\t{}", ck.vocab.decode(&ids).join(" "));
    }
    Ok(())
}

fn ablation_data(a: &AblateArgs) -> Result<(Vec<CaptionPair>, Vec<CaptionPair>)> {
    let train_set = match &a.data {
        Some(p) => load_data(p)?,
        None => generate(&desk_scenes(DESK_TRAIN_SEED, 2000))?,
    };
    let test_set = match &a.test {
        Some(p) => load_data(p)?,
        None => generate(&desk_scenes(DESK_TEST_SEED, 400))?,
    };
    Ok((train_set, test_set))
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(CliError::usage("--seeds must be at least 1"));
    }
    let (model, train_cfg) = resolve_config(&ModelFlags { desk: true, ..a.model.clone() })?;
    let (train_set, test_set) = ablation_data(a)?;
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let settings = AblationSettings {
        model,
        train: train_cfg.clone(),
        seeds: seeds.clone(),
        beam: a.beam,
        threads: train_cfg.threads,
    };
    let mut report = serde_json::Map::new();
    let mut ordering_failed = false;
    let mut progress = |r: &AblationRow| {
        eprintln!("{:<20} seed {}  spatial {:.3}  {:.1}s", r.variant, r.seed, r.spatial_accuracy, r.seconds);
    };
    if a.tables != Tables::Strategies {
        let rows = run_ablation(&train_set, &test_set, &component_variants(), &settings, &mut progress)?;
        let check = check_ordering(&rows, &seeds);
        println!("{}", markdown_table(&rows, &seeds));
        println!(
            "Full - Base: {:+.1} points; Base+GSR between on {}/{} seeds; Base+position-LSTM between on {}/{} seeds: {}",
            check.full_minus_base_points,
            check.gsr_between,
            check.seeds,
            check.lstm_between,
            check.seeds,
            if check.passed { "ordering holds" } else { "ordering violated" }
        );
        ordering_failed = !check.passed;
        report.insert("components".into(), json!({ "rows": rows, "ordering": check }));
    }
    if a.tables != Tables::Components {
        let rows = run_ablation(&train_set, &test_set, &strategy_variants(), &settings, &mut progress)?;
        println!("{}", markdown_table(&rows, &seeds));
        let enc = variant_mean(&rows, "GLU(enc.)", |r| r.spatial_accuracy);
        let both = variant_mean(&rows, "GLU(enc.+dec.)", |r| r.spatial_accuracy);
        println!(
            "GLU(enc.) {:.1} vs GLU(enc.+dec.) {:.1}: {}",
            100.0 * enc,
            100.0 * both,
            if enc >= both { "encoder-only gate at least as good" } else { "decoder gate helps here" }
        );
        report.insert("strategies".into(), json!({ "rows": rows, "glu_enc_at_least_enc_dec": enc >= both }));
    }
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&serde_json::Value::Object(report)).expect("json");
        std::fs::write(path, text + "\n")?;
    }
    if ordering_failed {
        return Err(CliError::check("ablation ordering check failed"));
    }
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let fault = match &a.inject_fault {
        Some(name) => {
            Some(OpKind::from_name(name).ok_or_else(|| CliError::usage(format!("unknown op {name:?}")))?)
        }
        None => None,
    };
    let report = run_suite(a.seed, fault)?;
    for c in &report.checks {
        println!(
            "{} {:<28} rel err {:.2e} (worst element {} of {})",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.rel_err,
            c.index,
            c.input
        );
    }
    println!("{} checks in {:.1}s", report.checks.len(), report.seconds);
    let failed: Vec<String> = report
        .failures()
        .map(|c| format!("{} (input {}, element {}, rel err {:.2e})", c.name, c.input, c.index, c.rel_err))
        .collect();
    if !failed.is_empty() {
        return Err(CliError::check(format!("gradient check failed: {}", failed.join("; "))));
    }
    if report.seconds >= 60.0 {
        return Err(CliError::check(format!("gradient check took {:.1}s", report.seconds)));
    }
    Ok(())
}
