//! Command-line entry point: one binary, one subcommand per pipeline stage.
//! Every run resolves its configuration (file plus flag overrides), writes it
//! into the output directory, and exits with a structured code:
//! 0 success, 2 config error, 3 data error, 4 backend error, 5 numerical abort.

use crate::analysis::{self, DecodeCache, HumanJudgmentSet, TauVariant};
use crate::captioner::{CaptionerConfig, CaptionerModel};
use crate::corpus::{load_split, tokenize, DatasetSplit, Vocabulary};
use crate::flaws::{self, FlawedSource};
use crate::judge::{HttpBackend, Judge, JudgeBackend, JudgeError, JudgeOptions, MockBackend};
use crate::rl::{self, RlError, TrainConfig};
use crate::scorers::dual_encoder::{DualEncoder, DualEncoderConfig, TrainOpts};
use crate::scorers::{FnScorer, RandomScorer, Scorer};
use crate::self_improving::{self, RetrainConfig};
use crate::synth::{self, SynthConfig};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum CliError {
    Config(Vec<String>),
    Data(String),
    Backend(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Backend(_) => 4,
            CliError::Numerical(_) => 5,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Config(fields) => format!("config error: {}", fields.join("; ")),
            CliError::Data(m) => format!("data error: {m}"),
            CliError::Backend(m) => format!("backend error: {m}"),
            CliError::Numerical(m) => format!("numerical abort: {m}"),
        }
    }
}

macro_rules! data_err {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}
data_err!(
    crate::corpus::CorpusError,
    crate::synth::SynthError,
    crate::flaws::FlawsError,
    crate::self_improving::SelfImprovingError,
    crate::analysis::AnalysisError,
    crate::captioner::CaptionerError,
    crate::scorers::dual_encoder::DualEncoderError,
    std::io::Error,
    serde_json::Error
);

impl From<RlError> for CliError {
    fn from(e: RlError) -> Self {
        match e {
            RlError::NumericalError { .. } | RlError::NonFiniteScore(_) => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<crate::scorers::ScorerError> for CliError {
    fn from(e: crate::scorers::ScorerError) -> Self {
        CliError::Backend(e.to_string())
    }
}

impl From<JudgeError> for CliError {
    fn from(e: JudgeError) -> Self {
        CliError::Backend(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Fully declarative run configuration. Every field has a default, may be set
/// in a JSON config file, and may be overridden by a flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// dataset manifest path
    pub data: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub min_frequency: u32,

    // synthetic data
    pub n_images: usize,
    pub embedding_dim: usize,
    pub captions_per_image: usize,
    pub noise: f32,

    // captioner
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,

    // training schedule
    pub pt_epochs: usize,
    pub rl_epochs: usize,
    pub batch_size: usize,
    pub pt_lr: f32,
    pub rl_lr: f32,
    pub epsilon_baseline: f64,
    /// scorer id used as the RL reward and the bench/eval default
    pub scorer: String,

    // dual encoder scorer
    pub embed_dim: usize,
    pub text_dim: usize,
    pub text_hidden: usize,
    pub scale_w: f32,
    pub scorer_epochs: usize,
    pub scorer_lr: f32,
    pub scorer_batch_size: usize,
    pub temperature: f32,
    pub negative_weight: f32,
    pub retrain_epochs: usize,

    // judge
    pub judge_backend: String,
    pub judge_host: String,
    pub judge_port: u16,
    pub judge_path: String,
    pub judge_model: String,
    /// environment variable holding the API token; never stored in config
    pub judge_auth_env: String,
    pub judge_timeout_ms: u64,
    /// 0 disables the budget guard
    pub judge_max_requests: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: PathBuf::from("data/manifest.json"),
            out_dir: PathBuf::from("out"),
            seed: 0,
            min_frequency: 1,
            n_images: 600,
            embedding_dim: 32,
            captions_per_image: 3,
            noise: 0.05,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 16,
            pt_epochs: 15,
            rl_epochs: 20,
            batch_size: 16,
            pt_lr: 3e-4,
            rl_lr: 2e-4,
            epsilon_baseline: 1e-8,
            scorer: "clipscore-lite".into(),
            embed_dim: 32,
            text_dim: 32,
            text_hidden: 64,
            scale_w: 2.5,
            scorer_epochs: 30,
            scorer_lr: 1e-3,
            scorer_batch_size: 32,
            temperature: 0.07,
            negative_weight: 1.0,
            retrain_epochs: 8,
            judge_backend: "mock".into(),
            judge_host: String::new(),
            judge_port: 0,
            judge_path: "/v1/judge".into(),
            judge_model: String::new(),
            judge_auth_env: String::new(),
            judge_timeout_ms: 10_000,
            judge_max_requests: 0,
        }
    }
}

impl RunConfig {
    /// Collects every offending field instead of stopping at the first.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut bad = Vec::new();
        let mut check = |ok: bool, field: &str, why: &str| {
            if !ok {
                bad.push(format!("{field}: {why}"));
            }
        };
        check(self.batch_size > 0, "batch_size", "must be positive");
        check(self.scorer_batch_size > 0, "scorer_batch_size", "must be positive");
        check(self.n_heads > 0, "n_heads", "must be positive");
        check(
            self.n_heads > 0 && self.d_model % self.n_heads == 0,
            "d_model",
            "must be divisible by n_heads",
        );
        check(self.max_len >= 2, "max_len", "must be at least 2");
        check(self.pt_lr > 0.0, "pt_lr", "must be positive");
        check(self.rl_lr > 0.0, "rl_lr", "must be positive");
        check(self.scorer_lr > 0.0, "scorer_lr", "must be positive");
        check(self.temperature > 0.0, "temperature", "must be positive");
        check(self.scale_w > 0.0, "scale_w", "must be positive");
        check(self.negative_weight >= 0.0, "negative_weight", "must be non-negative");
        check(self.epsilon_baseline > 0.0, "epsilon_baseline", "must be positive");
        check(!self.scorer.is_empty(), "scorer", "must be non-empty");
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(bad))
        }
    }
}

// ---------------------------------------------------------------------------
// Argument parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "capprobe", version, about = "caption metric probing pipeline")]
pub struct Cli {
    /// JSON config file; flags override its fields
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// machine-readable log lines
    #[arg(long, global = true)]
    pub json_logs: bool,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate the synthetic toy dataset
    SynthData(SynthArgs),
    /// Cross-entropy pretraining of the captioner
    Pretrain {
        #[arg(long)]
        pt_epochs: Option<usize>,
    },
    /// Reward-driven SCST stage on top of the pretrained checkpoints
    RlTrain {
        #[arg(long)]
        scorer: Option<String>,
        #[arg(long)]
        rl_epochs: Option<usize>,
    },
    /// Train the dual-encoder scorer on ground-truth pairs
    ScorerTrain {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Mine (positive, reward-hacked negative) pairs from checkpoints;
    /// defaults to every RL checkpoint in the run directory
    BuildPairs {
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Contrastively retrain the scorer on mined pairs
    SelfImprove {
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        scorer: Option<String>,
        #[arg(long)]
        negative_weight: Option<f32>,
        #[arg(long)]
        epochs: Option<usize>,
        /// id (and file stem) of the repaired scorer
        #[arg(long, default_value = "clipscore-lite-repaired")]
        out_id: String,
    },
    /// Flaw-discrimination benchmark
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
    /// Judge per-system decodes with the mock or remote backend
    Judge {
        #[arg(long)]
        backend: Option<String>,
        /// decode cache files (one per system)
        #[arg(long, required = true)]
        decodes: Vec<PathBuf>,
    },
    /// Kendall correlation of a scorer against human judgments
    Correlate {
        #[arg(long)]
        judgments: PathBuf,
        #[arg(long)]
        scorer: Option<String>,
        #[arg(long, default_value = "c")]
        variant: String,
        #[arg(long)]
        per_rater: bool,
    },
    /// Before/after checkpoint comparison table
    Compare {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long)]
        scorer: Vec<String>,
    },
    /// Render tables and charts from result files in the output directory
    Report,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_images: Option<usize>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// directory receiving manifest.json and embeddings/
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    /// Build the 5-GT/5-flawed benchmark from the test split
    Build {
        /// optional JSON map image_id -> [degenerate caption] used as flawed
        /// candidates instead of synthetic injection
        #[arg(long)]
        generations: Option<PathBuf>,
    },
    /// Score a benchmark file with a scorer
    Eval {
        #[arg(long)]
        scorer: Option<String>,
    },
}

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
struct Logger {
    json: bool,
}

impl Logger {
    fn info(&self, msg: &str) {
        if self.json {
            println!("{}", serde_json::json!({ "level": "info", "msg": msg }));
        } else {
            println!("{msg}");
        }
    }

    fn error(&self, msg: &str) {
        if self.json {
            eprintln!("{}", serde_json::json!({ "level": "error", "msg": msg }));
        } else {
            eprintln!("error: {msg}");
        }
    }
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

pub fn run() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are success, anything else a config error
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let log = Logger { json: cli.json_logs };
    match execute(cli, log) {
        Ok(()) => 0,
        Err(e) => {
            log.error(&e.message());
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => {
            let raw = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(vec![format!("config file {path:?}: {e}")]))?;
            serde_json::from_str(&raw)
                .map_err(|e| CliError::Config(vec![format!("config file {path:?}: {e}")]))?
        }
        None => RunConfig::default(),
    };
    if let Some(d) = &cli.data {
        config.data = d.clone();
    }
    if let Some(o) = &cli.out_dir {
        config.out_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    Ok(config)
}

/// Reproducibility record: the fully resolved config plus subcommand and
/// version, written before any work happens.
fn write_resolved(config: &RunConfig, command: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(&config.out_dir)?;
    let record = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
    });
    std::fs::write(
        config.out_dir.join(format!("resolved_{command}.json")),
        serde_json::to_string_pretty(&record)?,
    )?;
    Ok(())
}

fn execute(cli: Cli, log: Logger) -> Result<(), CliError> {
    let mut config = load_config(&cli)?;

    // subcommand-level overrides
    match &cli.cmd {
        Cmd::SynthData(args) => {
            if let Some(n) = args.n_images {
                config.n_images = n;
            }
            if let Some(d) = args.embedding_dim {
                config.embedding_dim = d;
            }
        }
        Cmd::Pretrain { pt_epochs } => {
            if let Some(e) = pt_epochs {
                config.pt_epochs = *e;
            }
        }
        Cmd::RlTrain { scorer, rl_epochs } => {
            if let Some(s) = scorer {
                config.scorer = s.clone();
            }
            if let Some(e) = rl_epochs {
                config.rl_epochs = *e;
            }
        }
        Cmd::ScorerTrain { epochs } => {
            if let Some(e) = epochs {
                config.scorer_epochs = *e;
            }
        }
        Cmd::SelfImprove { scorer, negative_weight, epochs, .. } => {
            if let Some(s) = scorer {
                config.scorer = s.clone();
            }
            if let Some(w) = negative_weight {
                config.negative_weight = *w;
            }
            if let Some(e) = epochs {
                config.retrain_epochs = *e;
            }
        }
        Cmd::Judge { backend, .. } => {
            if let Some(b) = backend {
                config.judge_backend = b.clone();
            }
        }
        Cmd::Bench { cmd: BenchCmd::Eval { scorer } } => {
            if let Some(s) = scorer {
                config.scorer = s.clone();
            }
        }
        _ => {}
    }
    config.validate()?;

    let command = match &cli.cmd {
        Cmd::SynthData(_) => "synth-data",
        Cmd::Pretrain { .. } => "pretrain",
        Cmd::RlTrain { .. } => "rl-train",
        Cmd::ScorerTrain { .. } => "scorer-train",
        Cmd::BuildPairs { .. } => "build-pairs",
        Cmd::SelfImprove { .. } => "self-improve",
        Cmd::Bench { cmd: BenchCmd::Build { .. } } => "bench-build",
        Cmd::Bench { cmd: BenchCmd::Eval { .. } } => "bench-eval",
        Cmd::Judge { .. } => "judge",
        Cmd::Correlate { .. } => "correlate",
        Cmd::Compare { .. } => "compare",
        Cmd::Report => "report",
    };
    write_resolved(&config, command)?;

    match cli.cmd {
        Cmd::SynthData(args) => cmd_synth(&config, args.out, log),
        Cmd::Pretrain { .. } => cmd_train(&config, 0, log),
        Cmd::RlTrain { .. } => cmd_train(&config, config.rl_epochs, log),
        Cmd::ScorerTrain { .. } => cmd_scorer_train(&config, log),
        Cmd::BuildPairs { checkpoint } => cmd_build_pairs(&config, &checkpoint, log),
        Cmd::SelfImprove { pairs, out_id, .. } => cmd_self_improve(&config, pairs, &out_id, log),
        Cmd::Bench { cmd: BenchCmd::Build { generations } } => {
            cmd_bench_build(&config, generations, log)
        }
        Cmd::Bench { cmd: BenchCmd::Eval { .. } } => cmd_bench_eval(&config, log),
        Cmd::Judge { decodes, .. } => cmd_judge(&config, &decodes, log),
        Cmd::Correlate { judgments, variant, per_rater, .. } => {
            cmd_correlate(&config, &judgments, &variant, per_rater, log)
        }
        Cmd::Compare { before, after, scorer } => {
            cmd_compare(&config, &before, &after, &scorer, log)
        }
        Cmd::Report => cmd_report(&config, log),
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn load_data(config: &RunConfig) -> Result<(DatasetSplit, Vocabulary), CliError> {
    let split = load_split(&config.data)?;
    let vocab = Vocabulary::build(&split.all_train_captions(), config.min_frequency)?;
    Ok((split, vocab))
}

fn all_images(split: &DatasetSplit) -> Vec<&crate::corpus::ImageRecord> {
    split.train.iter().chain(&split.val).chain(&split.test).collect()
}

fn scorer_path(config: &RunConfig, id: &str) -> PathBuf {
    config.out_dir.join(format!("{id}.json"))
}

/// Built-in scorer ids (`random`, `oracle`) or a trained dual encoder stored
/// as `<out_dir>/<id>.json`.
fn resolve_scorer(
    config: &RunConfig,
    id: &str,
    split: &DatasetSplit,
) -> Result<Box<dyn Scorer>, CliError> {
    match id {
        "random" => Ok(Box::new(RandomScorer { seed: config.seed })),
        "oracle" => {
            let gt: BTreeMap<String, BTreeSet<String>> = all_images(split)
                .iter()
                .map(|r| {
                    let caps = r.captions.iter().map(|c| tokenize(c).join(" ")).collect();
                    (r.image_id.clone(), caps)
                })
                .collect();
            Ok(Box::new(FnScorer {
                name: "oracle".to_string(),
                f: move |img: crate::scorers::ScoreImage<'_>, caption: &str| {
                    let norm = tokenize(caption).join(" ");
                    gt.get(img.image_id).map_or(0.0, |set| set.contains(&norm) as u8 as f64)
                },
            }))
        }
        other => {
            let path = scorer_path(config, other);
            if !path.exists() {
                return Err(CliError::Data(format!(
                    "scorer {other:?} not found at {path:?}; run scorer-train first"
                )));
            }
            Ok(Box::new(DualEncoder::load(&path)?))
        }
    }
}

/// Bare filenames refer to artifacts inside the run directory.
fn resolve_run_path(config: &RunConfig, path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() { config.out_dir.join(path) } else { path.into() }
}

fn load_checkpoint(
    config: &RunConfig,
    path: &Path,
    vocab: &Vocabulary,
) -> Result<CaptionerModel, CliError> {
    let resolved = resolve_run_path(config, path);
    Ok(CaptionerModel::load(&resolved, Some(&vocab.hash()))?)
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_synth(config: &RunConfig, out: Option<PathBuf>, log: Logger) -> Result<(), CliError> {
    let dir = out.unwrap_or_else(|| {
        config.data.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
    });
    let synth_config = SynthConfig {
        n_images: config.n_images,
        embedding_dim: config.embedding_dim,
        captions_per_image: config.captions_per_image,
        noise: config.noise,
        seed: config.seed,
    };
    let manifest = synth::write_dataset(&synth_config, &dir)?;
    log.info(&format!("wrote {} images to {}", config.n_images, manifest.display()));
    Ok(())
}

fn train_config(config: &RunConfig, rl_epochs: usize) -> TrainConfig {
    TrainConfig {
        pt_epochs: config.pt_epochs,
        rl_epochs,
        batch_size: config.batch_size,
        pt_lr: config.pt_lr,
        rl_lr: config.rl_lr,
        seed: config.seed,
        scorer_id: config.scorer.clone(),
        epsilon_baseline: config.epsilon_baseline,
    }
}

/// Shared by `pretrain` (rl_epochs forced to 0) and `rl-train`; the trainer
/// resumes from any checkpoints already in the output directory.
fn cmd_train(config: &RunConfig, rl_epochs: usize, log: Logger) -> Result<(), CliError> {
    let (split, vocab) = load_data(config)?;
    let scorer: Box<dyn Scorer> = if rl_epochs == 0 {
        // the PT stage never calls the scorer
        Box::new(RandomScorer { seed: config.seed })
    } else {
        resolve_scorer(config, &config.scorer, &split)?
    };
    let model_config = CaptionerConfig {
        vocab_size: vocab.size(),
        img_dim: split.embedding_dim,
        d_model: config.d_model,
        n_layers: config.n_layers,
        n_heads: config.n_heads,
        d_ff: config.d_ff,
        max_len: config.max_len,
    };
    let out = rl::train(
        &train_config(config, rl_epochs),
        &model_config,
        &vocab,
        &split,
        scorer.as_ref(),
        &config.out_dir,
    )?;
    log.info(&format!(
        "training complete: {} checkpoints, {} trace records",
        out.checkpoints.len(),
        out.trace.records.len()
    ));
    Ok(())
}

fn cmd_scorer_train(config: &RunConfig, log: Logger) -> Result<(), CliError> {
    let (split, vocab) = load_data(config)?;
    let encoder_config = DualEncoderConfig {
        img_dim: split.embedding_dim,
        embed_dim: config.embed_dim,
        text_dim: config.text_dim,
        text_hidden: config.text_hidden,
        scale_w: config.scale_w,
    };
    let mut encoder = DualEncoder::new(&config.scorer, encoder_config, vocab, config.seed);
    let items: Vec<crate::scorers::dual_encoder::ContrastiveItem> = split
        .train
        .iter()
        .flat_map(|rec| {
            let image = rec.pooled_embedding();
            rec.captions.iter().map(move |c| crate::scorers::dual_encoder::ContrastiveItem {
                image: image.clone(),
                positive: c.clone(),
                negative: None,
            })
        })
        .collect();
    let opts = TrainOpts {
        temperature: config.temperature,
        negative_weight: 0.0,
        batch_size: config.scorer_batch_size,
        epochs: config.scorer_epochs,
        lr: config.scorer_lr,
        seed: config.seed,
    };
    let losses = encoder.train_contrastive(&items, &opts)?;
    let path = scorer_path(config, &config.scorer);
    encoder.save(&path)?;
    log.info(&format!(
        "scorer {} trained on {} items, final loss {:.4}, saved to {}",
        config.scorer,
        items.len(),
        losses.last().copied().unwrap_or(f32::NAN),
        path.display()
    ));
    Ok(())
}

fn cmd_build_pairs(
    config: &RunConfig,
    checkpoints: &[PathBuf],
    log: Logger,
) -> Result<(), CliError> {
    let (split, vocab) = load_data(config)?;
    let checkpoints: Vec<PathBuf> = if checkpoints.is_empty() {
        // mine every RL checkpoint so the negatives cover the whole
        // trajectory of degeneration, not just its endpoint
        let mut found: Vec<PathBuf> = std::fs::read_dir(&config.out_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("rl_epoch_") && n.ends_with(".json"))
            })
            .collect();
        found.sort();
        if found.is_empty() {
            return Err(CliError::Data(format!(
                "no rl_epoch_*.json checkpoints in {}",
                config.out_dir.display()
            )));
        }
        // an evenly spaced subsample counted back from the final checkpoint;
        // using every checkpoint floods the pair set with near-duplicates
        // (including near-pretraining decodes) and dilutes the hardest
        // negatives
        let k = 4.min(found.len());
        let stride = found.len() / k;
        let mut picked: Vec<PathBuf> =
            (0..k).map(|i| found[found.len() - 1 - i * stride].clone()).collect();
        picked.reverse();
        picked
    } else {
        checkpoints.to_vec()
    };
    let mut pairs = Vec::new();
    let mut dropped = 0usize;
    for checkpoint in &checkpoints {
        let model = load_checkpoint(config, checkpoint, &vocab)?;
        let checkpoint_id = checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into());
        let build =
            self_improving::build_pairs(&split.train, &model, &checkpoint_id, &vocab, config.seed)?;
        pairs.extend(build.pairs);
        dropped += build.dropped_identical;
    }
    let path = config.out_dir.join("pairs.jsonl");
    self_improving::write_pairs(&path, &pairs)?;
    log.info(&format!(
        "mined {} pairs from {} checkpoints ({} dropped as identical) into {}",
        pairs.len(),
        checkpoints.len(),
        dropped,
        path.display()
    ));
    Ok(())
}

fn cmd_self_improve(
    config: &RunConfig,
    pairs_path: Option<PathBuf>,
    out_id: &str,
    log: Logger,
) -> Result<(), CliError> {
    let (split, _) = load_data(config)?;
    let pairs_path = pairs_path
        .map(|p| resolve_run_path(config, &p))
        .unwrap_or_else(|| config.out_dir.join("pairs.jsonl"));
    let pairs = self_improving::read_pairs(&pairs_path)?;
    let base = DualEncoder::load(&scorer_path(config, &config.scorer))?;
    let embeddings = self_improving::pooled_embeddings(&split.train);
    let retrain = RetrainConfig {
        temperature: config.temperature,
        batch_size: config.scorer_batch_size,
        epochs: config.retrain_epochs,
        negative_weight: config.negative_weight,
        lr: config.scorer_lr,
        seed: config.seed,
    };
    let (mut repaired, losses) =
        self_improving::contrastive_retrain(&base, &embeddings, &pairs, &retrain)?;
    repaired.scorer_id = out_id.to_string();
    let path = scorer_path(config, out_id);
    repaired.save(&path)?;
    let accuracy = self_improving::pair_accuracy(&repaired, &embeddings, &pairs)?;
    log.info(&format!(
        "repaired scorer {} saved to {}; pair accuracy {:.4}, final loss {:.4}",
        out_id,
        path.display(),
        accuracy,
        losses.last().copied().unwrap_or(f32::NAN)
    ));
    Ok(())
}

fn cmd_bench_build(
    config: &RunConfig,
    generations: Option<PathBuf>,
    log: Logger,
) -> Result<(), CliError> {
    let (split, _) = load_data(config)?;
    let source = match generations {
        Some(path) => {
            let map: BTreeMap<String, Vec<String>> =
                serde_json::from_str(&std::fs::read_to_string(resolve_run_path(config, &path))?)?;
            FlawedSource::Generations(map)
        }
        None => FlawedSource::Injectors,
    };
    let build = flaws::build_bench(&split.test, &source, config.seed)?;
    let path = config.out_dir.join("bench.jsonl");
    flaws::write_bench(&path, &build.items)?;
    log.info(&format!(
        "built benchmark with {} items ({} replacement-sampled) at {}",
        build.items.len(),
        build.replacement_sampled,
        path.display()
    ));
    Ok(())
}

fn cmd_bench_eval(config: &RunConfig, log: Logger) -> Result<(), CliError> {
    let (split, _) = load_data(config)?;
    let scorer = resolve_scorer(config, &config.scorer, &split)?;
    let items = flaws::read_bench(&config.out_dir.join("bench.jsonl"))?;
    let embeddings = self_improving::pooled_embeddings(&split.test);
    let eval = flaws::eval_bench(scorer.as_ref(), &items, &embeddings)?;
    log.info(&format!("bench accuracy {}: {:.1}", eval.scorer_id, eval.accuracy));

    // keep one entry per scorer in the accumulated results file
    let results_path = config.out_dir.join("bench_eval.json");
    let mut all: Vec<flaws::BenchEval> = if results_path.exists() {
        serde_json::from_str(&std::fs::read_to_string(&results_path)?)?
    } else {
        Vec::new()
    };
    all.retain(|e| e.scorer_id != eval.scorer_id);
    all.push(eval);
    all.sort_by(|a, b| a.scorer_id.cmp(&b.scorer_id));
    std::fs::write(&results_path, serde_json::to_string_pretty(&all)?)?;
    Ok(())
}

fn cmd_judge(config: &RunConfig, decodes: &[PathBuf], log: Logger) -> Result<(), CliError> {
    let (split, _) = load_data(config)?;
    let backend: Box<dyn JudgeBackend> = match config.judge_backend.as_str() {
        "mock" => {
            let gt = all_images(&split)
                .iter()
                .map(|r| (r.image_id.clone(), r.captions.clone()))
                .collect();
            Box::new(MockBackend { gt })
        }
        "remote" => {
            if config.judge_host.is_empty() || config.judge_port == 0 {
                return Err(CliError::Config(vec![
                    "judge_host: required for the remote backend".into(),
                    "judge_port: required for the remote backend".into(),
                ]));
            }
            Box::new(HttpBackend {
                id: "remote".into(),
                host: config.judge_host.clone(),
                port: config.judge_port,
                path: config.judge_path.clone(),
                model: config.judge_model.clone(),
                auth_env: if config.judge_auth_env.is_empty() {
                    None
                } else {
                    Some(config.judge_auth_env.clone())
                },
                timeout_ms: config.judge_timeout_ms,
            })
        }
        other => {
            return Err(CliError::Config(vec![format!(
                "judge_backend: unknown backend {other:?}"
            )]))
        }
    };
    let judge = Judge::new(
        backend,
        JudgeOptions {
            max_requests: (config.judge_max_requests > 0).then_some(config.judge_max_requests),
            cache_path: Some(config.out_dir.join("judge_cache.jsonl")),
            ..JudgeOptions::default()
        },
    )?;

    let mut softs: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for path in decodes {
        let cache: DecodeCache =
            serde_json::from_str(&std::fs::read_to_string(resolve_run_path(config, path))?)?;
        for (image_id, caption) in &cache.captions {
            let verdict = judge.judge_soft(image_id, &cache.label, caption)?;
            softs.entry(image_id.clone()).or_default().insert(cache.label.clone(), verdict.soft);
        }
    }
    let hard = crate::judge::hard_scores(&softs);
    let aggregates = crate::judge::aggregate(&softs, &hard);
    let csv = crate::judge::aggregate_csv(&aggregates);
    std::fs::write(config.out_dir.join("judge_aggregate.csv"), &csv)?;
    for row in &aggregates {
        log.info(&format!(
            "judge {}: soft mean {:.4}, hard sum {:.1} over {} images",
            row.system, row.soft_mean, row.hard_sum, row.n_images
        ));
    }
    Ok(())
}

fn cmd_correlate(
    config: &RunConfig,
    judgments: &Path,
    variant: &str,
    per_rater: bool,
    log: Logger,
) -> Result<(), CliError> {
    let variant = match variant {
        "b" => TauVariant::B,
        "c" => TauVariant::C,
        other => {
            return Err(CliError::Config(vec![format!("variant: expected b or c, got {other:?}")]))
        }
    };
    let (split, _) = load_data(config)?;
    let scorer = resolve_scorer(config, &config.scorer, &split)?;
    let set = HumanJudgmentSet::read_jsonl(&resolve_run_path(config, judgments))?;
    let embeddings: BTreeMap<String, Vec<f32>> = all_images(&split)
        .iter()
        .map(|r| (r.image_id.clone(), r.pooled_embedding()))
        .collect();
    for rec in &set.records {
        if !embeddings.contains_key(&rec.image_id) {
            return Err(CliError::Data(format!(
                "judgment references unknown image {}",
                rec.image_id
            )));
        }
    }
    let metric = |image_id: &str, caption: &str| {
        let emb = &embeddings[image_id];
        scorer
            .score(crate::scorers::ScoreImage { image_id, embedding: emb }, caption)
            .unwrap_or(f64::NAN)
    };
    let pairs = set.correlation_pairs(&metric, per_rater);
    let tau = analysis::kendall_tau(&pairs, variant)?;
    let record = serde_json::json!({
        "scorer": scorer.id(),
        "variant": format!("{variant:?}").to_lowercase(),
        "n_pairs": pairs.len(),
        "tau": tau,
    });
    std::fs::write(
        config.out_dir.join("correlate.json"),
        serde_json::to_string_pretty(&record)?,
    )?;
    log.info(&format!("kendall tau ({:?}) for {}: {:.4}", variant, scorer.id(), tau));
    Ok(())
}

fn cmd_compare(
    config: &RunConfig,
    before: &Path,
    after: &Path,
    scorer_ids: &[String],
    log: Logger,
) -> Result<(), CliError> {
    let (split, vocab) = load_data(config)?;
    let before_model = load_checkpoint(config, before, &vocab)?;
    let after_model = load_checkpoint(config, after, &vocab)?;
    let before_cache = analysis::decode_split(&before_model, &vocab, &split.val, "before");
    let after_cache = analysis::decode_split(&after_model, &vocab, &split.val, "after");

    let ids: Vec<String> =
        if scorer_ids.is_empty() { vec![config.scorer.clone()] } else { scorer_ids.to_vec() };
    let scorers: Vec<Box<dyn Scorer>> = ids
        .iter()
        .map(|id| resolve_scorer(config, id, &split))
        .collect::<Result<_, _>>()?;
    let scorer_refs: Vec<&dyn Scorer> = scorers.iter().map(|s| s.as_ref()).collect();

    let report =
        analysis::compare_checkpoints(&[&before_cache, &after_cache], &split.val, &scorer_refs)?;
    std::fs::write(config.out_dir.join("compare.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(config.out_dir.join("compare.csv"), report.to_csv())?;
    for (cache, name) in [(&before_cache, "decodes_before.json"), (&after_cache, "decodes_after.json")] {
        std::fs::write(config.out_dir.join(name), serde_json::to_string_pretty(cache)?)?;
    }
    log.info(&report.to_markdown());
    Ok(())
}

fn cmd_report(config: &RunConfig, log: Logger) -> Result<(), CliError> {
    let manifest = analysis::emit_report(&config.out_dir, &config.out_dir.join("report"))?;
    log.info(&format!(
        "report rendered from {:?} into {} files",
        manifest.inputs,
        manifest.outputs.len()
    ));
    Ok(())
}
