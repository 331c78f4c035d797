//! Single command-line entry point wiring the whole pipeline: dataset
//! generation, encoder pretraining, triplet construction, training,
//! finetuning, swapping, evaluation and ablation suites.
//!
//! Settings resolve in three layers — built-in defaults, then the optional
//! `--config` JSON file, then explicit flags, with flags winning. The config
//! file holds one section per subcommand whose keys are the long flag names:
//!
//! ```json
//! { "train": { "steps": 5000, "batch": 8 }, "eval": { "steps": 1 } }
//! ```
//!
//! Every artifact directory receives the fully resolved settings that
//! produced it as `run_config.json`; single-file artifacts get a sibling
//! `<name>.run.json`. Failures print a machine-readable JSON record to
//! stderr and exit 1; usage errors exit 2.

pub mod ablate;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::evalsuite::evaluate_run;
use crate::synthfaces::dataset::{generate_dataset, load_image_png, save_image_png};
use crate::synthfaces::oracle::{
    train_oracle_encoders, DiskSamples, OracleEncoders, OracleTrainConfig, RenderedSamples,
    MIN_TRAINING_SAMPLES,
};
use crate::swapnets::ModelConfig;
use crate::trainer::{
    control_finetune, swap, train_loop, CheckpointBundle, TrainConfig, TrainOptions,
};
use crate::tripletforge::{build_manifest, load_triplet_manifest, ControlTransform, ProxySwapper};
use ablate::{run_ablation, AblateSpec, SuiteKind};

/// Parses real process arguments and runs; the process exit status.
pub fn run() -> i32 {
    run_with(std::env::args_os())
}

/// [`run`] over explicit arguments (the first is the program name).
pub fn run_with<I, A>(argv: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let command = cli.command.name();
    match dispatch(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            let record = serde_json::json!({ "command": command, "error": format!("{e:#}") });
            eprintln!("{record}");
            1
        }
    }
}

#[derive(Parser)]
#[command(
    name = "swaplab",
    version,
    about = "Face-swap training lab on synthetic parametric faces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labeled dataset of synthetic faces
    GenData(GenDataArgs),
    /// Train and freeze the identity/attribute encoders
    TrainOracles(TrainOraclesArgs),
    /// Build a triplet manifest with a chosen proxy swapper
    BuildTriplets(BuildTripletsArgs),
    /// Train a swap model on a triplet manifest
    Train(TrainArgs),
    /// Continue a checkpoint on a control-transformed manifest
    Finetune(FinetuneArgs),
    /// Swap one source identity onto one target image
    Swap(SwapArgs),
    /// Score a checkpoint with the full evaluation protocol
    Eval(EvalArgs),
    /// Train-and-evaluate comparison suites
    Ablate(AblateArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainOracles(_) => "train-oracles",
            Command::BuildTriplets(_) => "build-triplets",
            Command::Train(_) => "train",
            Command::Finetune(_) => "finetune",
            Command::Swap(_) => "swap",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<String> {
    match command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::TrainOracles(a) => cmd_train_oracles(a),
        Command::BuildTriplets(a) => cmd_build_triplets(a),
        Command::Train(a) => cmd_train(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Swap(a) => cmd_swap(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

// ---- layered settings ----

/// The resolved invocation that produced an artifact, written next to it.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub settings: BTreeMap<String, Value>,
}

impl RunConfig {
    fn write_into_dir(&self, dir: &Path) -> anyhow::Result<()> {
        self.write_to(&dir.join("run_config.json"))
    }

    fn write_beside_file(&self, artifact: &Path) -> anyhow::Result<()> {
        let mut name = artifact.file_name().unwrap_or_default().to_os_string();
        name.push(".run.json");
        self.write_to(&artifact.with_file_name(name))
    }

    fn write_to(&self, path: &Path) -> anyhow::Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }
}

/// One subcommand's view of the config file plus everything resolved so far.
/// Each getter consumes its key; leftover keys in the section are reported as
/// typos when the command finishes resolving.
struct Settings {
    command: &'static str,
    section: serde_json::Map<String, Value>,
    resolved: BTreeMap<String, Value>,
}

const COMMAND_NAMES: [&str; 8] = [
    "gen-data",
    "train-oracles",
    "build-triplets",
    "train",
    "finetune",
    "swap",
    "eval",
    "ablate",
];

impl Settings {
    fn load(command: &'static str, config: Option<&Path>) -> anyhow::Result<Self> {
        let mut section = serde_json::Map::new();
        if let Some(path) = config {
            let raw = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            let parsed: Value = serde_json::from_str(&raw)
                .with_context(|| format!("parsing config file {}", path.display()))?;
            let Value::Object(map) = parsed else {
                bail!("config file {} must be a JSON object of sections", path.display());
            };
            for (name, body) in map {
                if !COMMAND_NAMES.contains(&name.as_str()) {
                    bail!("config section `{name}` is not a known command");
                }
                if !body.is_object() {
                    bail!("config section `{name}` must be an object");
                }
                if name == command {
                    section = body.as_object().cloned().unwrap_or_default();
                }
            }
        }
        Ok(Settings { command, section, resolved: BTreeMap::new() })
    }

    fn take(&mut self, key: &str) -> Option<Value> {
        self.section.remove(key)
    }

    fn record(&mut self, key: &str, value: impl Into<Value>) {
        self.resolved.insert(key.to_string(), value.into());
    }

    fn usize(&mut self, key: &str, flag: Option<usize>, default: usize) -> anyhow::Result<usize> {
        let v = match (flag, self.take(key)) {
            (Some(f), _) => f,
            (None, Some(raw)) => raw
                .as_u64()
                .ok_or_else(|| self.type_error(key, "an unsigned integer"))?
                as usize,
            (None, None) => default,
        };
        self.record(key, v as u64);
        Ok(v)
    }

    fn u64(&mut self, key: &str, flag: Option<u64>, default: u64) -> anyhow::Result<u64> {
        let v = match (flag, self.take(key)) {
            (Some(f), _) => f,
            (None, Some(raw)) => {
                raw.as_u64().ok_or_else(|| self.type_error(key, "an unsigned integer"))?
            }
            (None, None) => default,
        };
        self.record(key, v);
        Ok(v)
    }

    fn f64(&mut self, key: &str, flag: Option<f64>, default: f64) -> anyhow::Result<f64> {
        let v = match (flag, self.take(key)) {
            (Some(f), _) => f,
            (None, Some(raw)) => {
                raw.as_f64().ok_or_else(|| self.type_error(key, "a number"))?
            }
            (None, None) => default,
        };
        self.record(key, v);
        Ok(v)
    }

    fn flag(&mut self, key: &str, flag: bool) -> anyhow::Result<bool> {
        let v = if flag {
            true
        } else {
            match self.take(key) {
                Some(raw) => raw.as_bool().ok_or_else(|| self.type_error(key, "a boolean"))?,
                None => false,
            }
        };
        self.record(key, v);
        Ok(v)
    }

    fn string(
        &mut self,
        key: &str,
        flag: Option<String>,
        default: Option<&str>,
    ) -> anyhow::Result<Option<String>> {
        let v = match (flag, self.take(key)) {
            (Some(f), _) => Some(f),
            (None, Some(raw)) => Some(
                raw.as_str().ok_or_else(|| self.type_error(key, "a string"))?.to_string(),
            ),
            (None, None) => default.map(str::to_string),
        };
        if let Some(s) = &v {
            self.record(key, s.clone());
        }
        Ok(v)
    }

    /// Two comma-separated (flag) or JSON-array (file) unsigned integers.
    fn widths(
        &mut self,
        key: &str,
        flag: Option<&str>,
        default: [usize; 2],
    ) -> anyhow::Result<[usize; 2]> {
        let parsed = match (flag, self.take(key)) {
            (Some(f), _) => Some(parse_u64_list(f).with_context(|| format!("--{key}"))?),
            (None, Some(raw)) => Some(value_u64_list(&raw).ok_or_else(|| {
                self.type_error(key, "an array of unsigned integers")
            })?),
            (None, None) => None,
        };
        let v = match parsed {
            None => default,
            Some(list) => {
                let [a, b] = list[..] else {
                    bail!("`{key}` needs exactly two values, got {}", list.len());
                };
                [a as usize, b as usize]
            }
        };
        self.record(key, vec![v[0] as u64, v[1] as u64]);
        Ok(v)
    }

    fn seeds(
        &mut self,
        key: &str,
        flag: Option<&str>,
        default: &[u64],
    ) -> anyhow::Result<Vec<u64>> {
        let v = match (flag, self.take(key)) {
            (Some(f), _) => parse_u64_list(f).with_context(|| format!("--{key}"))?,
            (None, Some(raw)) => value_u64_list(&raw)
                .ok_or_else(|| self.type_error(key, "an array of unsigned integers"))?,
            (None, None) => default.to_vec(),
        };
        if v.is_empty() {
            bail!("`{key}` needs at least one value");
        }
        self.record(key, v.clone());
        Ok(v)
    }

    fn path(&mut self, key: &str, value: &Path) {
        self.record(key, value.display().to_string());
    }

    fn type_error(&self, key: &str, expected: &str) -> anyhow::Error {
        anyhow!("config `{}.{key}` must be {expected}", self.command)
    }

    /// Rejects config keys no getter consumed, then seals the record.
    fn finish(self) -> anyhow::Result<RunConfig> {
        if let Some(stray) = self.section.keys().next() {
            bail!("config section `{}` has unknown key `{stray}`", self.command);
        }
        Ok(RunConfig { command: self.command.to_string(), settings: self.resolved })
    }
}

fn parse_u64_list(text: &str) -> anyhow::Result<Vec<u64>> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<u64>()
                .map_err(|_| anyhow!("`{part}` is not an unsigned integer"))
        })
        .collect()
}

fn value_u64_list(value: &Value) -> Option<Vec<u64>> {
    value.as_array()?.iter().map(Value::as_u64).collect()
}

fn load_oracles(path: &Path) -> anyhow::Result<OracleEncoders> {
    OracleEncoders::load(path)
        .with_context(|| format!("loading encoders from {}", path.display()))
}

fn load_bundle(path: &Path) -> anyhow::Result<CheckpointBundle> {
    CheckpointBundle::load(path)
        .with_context(|| format!("loading checkpoint from {}", path.display()))
}

// ---- gen-data ----

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for images and the manifest
    #[arg(long)]
    out: PathBuf,
    /// Number of faces to render
    #[arg(long)]
    count: Option<usize>,
    /// Root seed for factor sampling
    #[arg(long)]
    seed: Option<u64>,
    /// Layered JSON settings file
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_gen_data(args: GenDataArgs) -> anyhow::Result<String> {
    let mut s = Settings::load("gen-data", args.config.as_deref())?;
    let count = s.usize("count", args.count, 1000)?;
    let seed = s.u64("seed", args.seed, 0)?;
    s.path("out", &args.out);
    let run = s.finish()?;

    let records = generate_dataset(&args.out, seed, count)?;
    run.write_into_dir(&args.out)?;
    Ok(format!("wrote {} labeled faces to {}", records.len(), args.out.display()))
}

// ---- train-oracles ----

#[derive(Args)]
struct TrainOraclesArgs {
    /// Where the frozen encoder file lands
    #[arg(long)]
    out: PathBuf,
    /// Train from a generated dataset directory instead of rendering on the fly
    #[arg(long, conflicts_with = "samples")]
    data: Option<PathBuf>,
    /// Samples to render on the fly (ignored with --data)
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Cosine-annealed learning-rate floor
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Every n-th sample is held out for validation
    #[arg(long)]
    val_stride: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_train_oracles(args: TrainOraclesArgs) -> anyhow::Result<String> {
    let mut s = Settings::load("train-oracles", args.config.as_deref())?;
    let defaults = OracleTrainConfig::default();
    let cfg = OracleTrainConfig {
        batch_size: s.usize("batch", args.batch, defaults.batch_size)?,
        learning_rate: s.f64("lr", args.lr, defaults.learning_rate)?,
        min_learning_rate: s.f64("min-lr", args.min_lr, defaults.min_learning_rate)?,
        max_epochs: s.usize("max-epochs", args.max_epochs, defaults.max_epochs)?,
        val_stride: s.usize("val-stride", args.val_stride, defaults.val_stride)?,
        seed: s.u64("seed", args.seed, defaults.seed)?,
    };
    let samples = s.usize("samples", args.samples, MIN_TRAINING_SAMPLES)?;
    s.path("out", &args.out);
    if let Some(data) = &args.data {
        s.path("data", data);
    }
    let run = s.finish()?;

    let encoders = match &args.data {
        Some(dir) => {
            let source = DiskSamples::open(dir)?;
            train_oracle_encoders(&source, &cfg)?
        }
        None => {
            let source = RenderedSamples::from_seed(cfg.seed, samples);
            train_oracle_encoders(&source, &cfg)?
        }
    };
    encoders.save(&args.out)?;
    run.write_beside_file(&args.out)?;

    let m = &encoders.metadata;
    Ok(format!(
        "froze encoders at {} | identity epochs {} worst rmse {:.4} | attribute epochs {} worst rmse {:.4} | same-pair cosine {:.4} overlap {:.2}%",
        args.out.display(),
        m.epochs_identity,
        m.identity_val_rmse.iter().cloned().fold(0.0, f64::max),
        m.epochs_attribute,
        m.attribute_val_rmse.iter().cloned().fold(0.0, f64::max),
        m.separation.same_mean,
        100.0 * m.separation.overlap,
    ))
}

// ---- build-triplets ----

#[derive(Args)]
struct BuildTripletsArgs {
    /// Output directory for images and the triplet manifest
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    /// Proxy swapper: oracle, attr_noisy or id_weak
    #[arg(long)]
    proxy: Option<String>,
    /// Control transform applied to every triplet (e.g. preserve_glasses)
    #[arg(long)]
    transform: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_build_triplets(args: BuildTripletsArgs) -> anyhow::Result<String> {
    let mut s = Settings::load("build-triplets", args.config.as_deref())?;
    let count = s.usize("count", args.count, 1000)?;
    let proxy_name = s.string("proxy", args.proxy, Some("oracle"))?.expect("defaulted");
    let transform = s.string("transform", args.transform, None)?;
    let seed = s.u64("seed", args.seed, 0)?;
    s.path("out", &args.out);
    let run = s.finish()?;

    let proxy = ProxySwapper::by_name(&proxy_name)?;
    let transform = transform.as_deref().map(ControlTransform::by_name).transpose()?;
    let manifest = build_manifest(&args.out, count, &proxy, transform, seed)?;
    run.write_into_dir(&args.out)?;
    Ok(format!(
        "wrote {} triplets (proxy {}{}) to {}",
        manifest.records.len(),
        proxy.name(),
        manifest.transform.as_deref().map(|t| format!(", transform {t}")).unwrap_or_default(),
        args.out.display()
    ))
}

// ---- train ----

#[derive(Args)]
struct TrainArgs {
    /// Triplet manifest directory
    #[arg(long)]
    data: PathBuf,
    /// Frozen encoder file from train-oracles
    #[arg(long)]
    oracles: PathBuf,
    /// Output directory (checkpoint.swlb, train_log.jsonl)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Require the manifest to have been built by this proxy
    #[arg(long)]
    expect_proxy: Option<String>,
    /// Encoder/decoder channel widths, e.g. 64,96
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    context_dim: Option<usize>,
    #[arg(long)]
    context_tokens: Option<usize>,
    #[arg(long)]
    id_tokens: Option<usize>,
    /// Drop the reference-feature branch
    #[arg(long)]
    no_facenet: bool,
    /// Drop the identity-adapter branch
    #[arg(long)]
    no_id_adapter: bool,
    /// Keep the identity loss out of the optimized total
    #[arg(long)]
    no_id_loss: bool,
    /// Keep the reconstruction loss out of the optimized total
    #[arg(long)]
    no_rec_loss: bool,
    #[arg(long)]
    log_every: Option<usize>,
    /// Snapshot cadence in steps (0: only the final state)
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Resume from an existing checkpoint file
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn resolve_train_config(s: &mut Settings, args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let defaults = TrainConfig::default();
    let model_defaults = ModelConfig::default();
    Ok(TrainConfig {
        batch_size: s.usize("batch", args.batch, defaults.batch_size)?,
        learning_rate: s.f64("lr", args.lr, defaults.learning_rate)?,
        total_steps: s.usize("steps", args.steps, defaults.total_steps)?,
        proxy: s.string("expect-proxy", args.expect_proxy.clone(), None)?,
        seed: s.u64("seed", args.seed, defaults.seed)?,
        no_facenet: s.flag("no-facenet", args.no_facenet)?,
        no_id_adapter: s.flag("no-id-adapter", args.no_id_adapter)?,
        no_id_loss: s.flag("no-id-loss", args.no_id_loss)?,
        no_rec_loss: s.flag("no-rec-loss", args.no_rec_loss)?,
        model: ModelConfig {
            level_widths: s.widths("widths", args.widths.as_deref(), model_defaults.level_widths)?,
            attention_head_dim: s.usize("head-dim", args.head_dim, model_defaults.attention_head_dim)?,
            context_dim: s.usize("context-dim", args.context_dim, model_defaults.context_dim)?,
            context_tokens: s.usize("context-tokens", args.context_tokens, model_defaults.context_tokens)?,
            id_tokens: s.usize("id-tokens", args.id_tokens, model_defaults.id_tokens)?,
            ..model_defaults
        },
        ..defaults
    })
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<String> {
    let mut s = Settings::load("train", args.config.as_deref())?;
    let config = resolve_train_config(&mut s, &args)?;
    let log_every = s.usize("log-every", args.log_every, 10)?;
    let checkpoint_every = s.usize("checkpoint-every", args.checkpoint_every, 0)?;
    s.path("data", &args.data);
    s.path("oracles", &args.oracles);
    s.path("out", &args.out);
    if let Some(resume) = &args.resume {
        s.path("resume", resume);
    }
    let run = s.finish()?;

    let oracles = load_oracles(&args.oracles)?;
    let manifest = load_triplet_manifest(&args.data)?;
    let resume = args.resume.as_deref().map(load_bundle).transpose()?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let opts = TrainOptions {
        log_path: Some(args.out.join("train_log.jsonl")),
        log_every,
        checkpoint_path: Some(args.out.join("checkpoint.swlb")),
        checkpoint_every,
        resume,
    };
    let bundle = train_loop(&args.data, &manifest, &config, &oracles, &opts)?;
    run.write_into_dir(&args.out)?;
    Ok(format!(
        "trained to step {} | checkpoint {} | params {}",
        bundle.step,
        args.out.join("checkpoint.swlb").display(),
        &bundle.params_hash()[..12],
    ))
}

// ---- finetune ----

#[derive(Args)]
struct FinetuneArgs {
    /// Checkpoint to continue from
    #[arg(long)]
    ckpt: PathBuf,
    /// Control-transformed triplet manifest directory
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    oracles: PathBuf,
    /// Output directory (checkpoint.swlb, finetune_log.jsonl)
    #[arg(long)]
    out: PathBuf,
    /// Additional steps on top of the checkpoint's count
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_finetune(args: FinetuneArgs) -> anyhow::Result<String> {
    let mut s = Settings::load("finetune", args.config.as_deref())?;
    let steps = s.usize("steps", args.steps, 300)?;
    let log_every = s.usize("log-every", args.log_every, 10)?;
    s.path("ckpt", &args.ckpt);
    s.path("data", &args.data);
    s.path("oracles", &args.oracles);
    s.path("out", &args.out);
    let run = s.finish()?;

    let oracles = load_oracles(&args.oracles)?;
    let bundle = load_bundle(&args.ckpt)?;
    let manifest = load_triplet_manifest(&args.data)?;
    let Some(transform) = manifest.transform.clone() else {
        bail!("manifest at {} has no control transform; finetuning needs one", args.data.display());
    };
    let mut config = bundle.config.clone();
    config.control = Some(transform.clone());
    config.total_steps = steps;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let opts = TrainOptions {
        log_path: Some(args.out.join("finetune_log.jsonl")),
        log_every,
        checkpoint_path: Some(args.out.join("checkpoint.swlb")),
        checkpoint_every: 0,
        resume: None,
    };
    let tuned = control_finetune(bundle, &args.data, &manifest, &config, &oracles, opts)?;
    let ckpt_path = args.out.join("checkpoint.swlb");
    tuned.save(&ckpt_path)?;
    run.write_into_dir(&args.out)?;
    Ok(format!(
        "finetuned on `{transform}` to step {} | checkpoint {}",
        tuned.step,
        ckpt_path.display()
    ))
}

// ---- swap ----

#[derive(Args)]
struct SwapArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    oracles: PathBuf,
    /// Identity provider image (64×64 PNG)
    #[arg(long)]
    source: PathBuf,
    /// Attribute provider image (64×64 PNG)
    #[arg(long)]
    target: PathBuf,
    /// Output PNG path
    #[arg(long)]
    out: PathBuf,
    /// Denoising ladder length
    #[arg(long)]
    steps: Option<usize>,
    /// Noise seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_swap(args: SwapArgs) -> anyhow::Result<String> {
    let mut s = Settings::load("swap", args.config.as_deref())?;
    let k = s.usize("steps", args.steps, 1)?;
    let seed = s.u64("seed", args.seed, 0)?;
    s.path("ckpt", &args.ckpt);
    s.path("oracles", &args.oracles);
    s.path("source", &args.source);
    s.path("target", &args.target);
    s.path("out", &args.out);
    let run = s.finish()?;

    let oracles = load_oracles(&args.oracles)?;
    let bundle = load_bundle(&args.ckpt)?;
    let source = load_image_png(&args.source)?;
    let target = load_image_png(&args.target)?;
    let swapped = swap(&bundle, &oracles, &source, &target, k, seed)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    save_image_png(&args.out, &swapped)?;
    run.write_beside_file(&args.out)?;
    Ok(format!("wrote swapped image to {} (k={k})", args.out.display()))
}

// ---- eval ----

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    oracles: PathBuf,
    /// Triplet manifest directory to evaluate on
    #[arg(long)]
    manifest: PathBuf,
    /// Denoising ladder length
    #[arg(long)]
    steps: Option<usize>,
    /// Report directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<String> {
    let mut s = Settings::load("eval", args.config.as_deref())?;
    let k = s.usize("steps", args.steps, 1)?;
    s.path("ckpt", &args.ckpt);
    s.path("oracles", &args.oracles);
    s.path("manifest", &args.manifest);
    s.path("out", &args.out);
    let run = s.finish()?;

    let oracles = load_oracles(&args.oracles)?;
    let bundle = load_bundle(&args.ckpt)?;
    let outcome = evaluate_run(&bundle, &oracles, &args.manifest, k, &args.out)?;
    run.write_into_dir(&args.out)?;
    Ok(format!("{}\nreport written to {}", outcome.table().trim_end(), args.out.display()))
}

// ---- ablate ----

#[derive(Args)]
struct AblateArgs {
    /// Suite to run: architecture, losses, proxy or steps
    #[arg(long)]
    suite: String,
    #[arg(long)]
    oracles: PathBuf,
    /// Working directory for all runs and the comparison table
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    train_pairs: Option<usize>,
    #[arg(long)]
    eval_pairs: Option<usize>,
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Encoder/decoder channel widths, e.g. 32,48
    #[arg(long)]
    widths: Option<String>,
    /// Evaluation ladder length (the steps suite overrides per row)
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated training seeds; each variant runs once per seed
    #[arg(long)]
    seeds: Option<String>,
    /// Root seed for the generated datasets
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_ablate(args: AblateArgs) -> anyhow::Result<String> {
    let mut s = Settings::load("ablate", args.config.as_deref())?;
    let defaults = AblateSpec::default();
    let suite_name = s.string("suite", Some(args.suite.clone()), None)?.expect("required flag");
    let spec = AblateSpec {
        suite: SuiteKind::by_name(&suite_name)?,
        train_pairs: s.usize("train-pairs", args.train_pairs, defaults.train_pairs)?,
        eval_pairs: s.usize("eval-pairs", args.eval_pairs, defaults.eval_pairs)?,
        train_steps: s.usize("train-steps", args.train_steps, defaults.train_steps)?,
        batch_size: s.usize("batch", args.batch, defaults.batch_size)?,
        learning_rate: s.f64("lr", args.lr, defaults.learning_rate)?,
        level_widths: s.widths("widths", args.widths.as_deref(), defaults.level_widths)?,
        k_eval: s.usize("k", args.k, defaults.k_eval)?,
        seeds: s.seeds("seeds", args.seeds.as_deref(), &defaults.seeds)?,
        data_seed: s.u64("data-seed", args.data_seed, defaults.data_seed)?,
    };
    s.path("oracles", &args.oracles);
    s.path("out", &args.out);
    let run = s.finish()?;

    let oracles = load_oracles(&args.oracles)?;
    let outcome = run_ablation(&oracles, &spec, &args.out)?;
    run.write_into_dir(&args.out)?;
    let table = outcome.table();
    if outcome.failed_rows() > 0 {
        bail!("{} of {} variants failed:\n{table}", outcome.failed_rows(), outcome.rows.len());
    }
    Ok(format!("{}\ncomparison written to {}", table.trim_end(), args.out.display()))
}
