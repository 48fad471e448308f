//! Command-line entry point. Every command reads one JSON experiment config
//! (flags override file values), writes under `--out`, and records config
//! hash, seed and artifact checksums in `<out>/manifest.json`.
//!
//! Exit codes: 0 success, 1 runtime error, 2 configuration error. Failures
//! print a single `error[<class>]: <message>` line on stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    embed_records, emit_report, pca_project, silhouette_by_organ, temperature_sweep, write_embeddings_csv,
    write_sweep_csv, MetricsReport, DEFAULT_TEMPERATURES,
};
use crate::dcc::{LossConfig, LossMode};
use crate::error::Error;
use crate::model::{Checkpoint, ModelConfig};
use crate::phantom::{DatasetSpec, OrganSpec, Phase};
use crate::trainer::{embedding_patches, evaluate, finetune, pretrain, Dataset, TrainConfig};

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn desk_dataset() -> DatasetSpec {
    ExperimentConfig::desk().dataset
}

fn desk_train() -> TrainConfig {
    ExperimentConfig::desk().train
}

/// One JSON document describing a whole experiment. Omitted `dataset` and
/// `train` sections fall back to the desk config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "desk_dataset")]
    pub dataset: DatasetSpec,
    #[serde(default = "desk_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    /// Desk-scale default: a 48x48x24 two-phase phantom with two
    /// contrast-varying and two contrast-invariant organs, 32-pixel patches.
    pub fn desk() -> Self {
        let organ = |id: u8, name: &str, cx: f64, cy: f64, nc: f64, ce: f64| OrganSpec {
            class_id: id,
            name: name.to_string(),
            center: [cx, cy, 0.5],
            semi_axes: [0.17, 0.17, 0.35],
            intensity_by_phase: [(Phase::NC, nc), (Phase::CE, ce)].into_iter().collect(),
            texture_sd: 10.0,
        };
        ExperimentConfig {
            dataset: DatasetSpec {
                dims: [48, 48, 24],
                spacing_mm: [1.0, 1.0, 2.0],
                phases: vec![Phase::NC, Phase::CE],
                organs: vec![
                    organ(1, "liver", 0.28, 0.28, -40.0, 120.0),
                    organ(2, "kidney", 0.72, 0.28, 0.0, 160.0),
                    organ(3, "fat", 0.28, 0.72, -120.0, -120.0),
                    organ(4, "bone", 0.72, 0.72, 220.0, 220.0),
                ],
                volumes_per_phase: 3,
                test_volumes_per_phase: 2,
                corruption_rate: 0.1,
                slice_score_range: [-5.0, 6.0],
            },
            train: TrainConfig {
                patch_size: 32,
                model: ModelConfig::default(),
                ..TrainConfig::default()
            },
            loss: LossConfig::default(),
            out_dir: default_out(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        let [h, w, _] = self.dataset.dims;
        if self.train.patch_size > h.min(w) {
            return Err(Error::Config(format!(
                "patch_size {} exceeds the slice size {h}x{w}",
                self.train.patch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "dccl", version, about = "Contrast-correlation contrastive pretraining on synthetic CT phantoms")]
pub struct Cli {
    /// Experiment config (JSON). Without it the built-in desk config is used.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory written by `generate` [default: <out>/dataset].
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training phases, e.g. `NC,CE`; overrides the config.
    #[arg(long, value_delimiter = ',')]
    pub phases: Option<Vec<Phase>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize, preprocess and store the phantom dataset.
    Generate,
    /// Contrastive pretraining; writes pretrain.ckpt and pretrain_loss.csv.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Loss weighting; overrides the config.
        #[arg(long)]
        loss: Option<LossMode>,
    },
    /// Dice fine-tuning; writes model.ckpt and finetune_loss.csv.
    Finetune {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Pretrained checkpoint; without it the encoder starts from scratch.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Scores a fine-tuned model on the test split; writes report.json/csv.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        /// Fine-tuned model [default: <out>/model.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Exports test-split embeddings and per-organ PCA coordinates.
    Embed {
        #[command(flatten)]
        data: DataArgs,
        /// Pretrained checkpoint [default: <out>/pretrain.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pretrain, fine-tune and evaluate for each temperature; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        /// Temperatures, e.g. `0.01,0.07,1.0` [default: 0.01,0.07,0.1,0.5,1.0].
        #[arg(long, value_delimiter = ',')]
        temps: Option<Vec<f64>>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::Embed { .. } => "embed",
            Command::Sweep { .. } => "sweep",
        }
    }
}

/// A failure with its exit code and stable class.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub class: String,
    pub message: String,
}

impl CliError {
    fn config(class: &str, message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            class: class.to_string(),
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: 1,
            class: e.class().to_string(),
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn load_config(path: Option<&Path>) -> CliResult<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::desk());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config("config.unreadable", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        let msg = e.to_string();
        let class = if msg.starts_with("unknown field") || msg.starts_with("unknown variant") {
            "config.unknown_key"
        } else {
            "config.invalid"
        };
        CliError::config(class, format!("{}: {msg}", path.display()))
    })
}

/// Applies flag overrides (flags win) and validates before any work.
fn resolve(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    match &cli.command {
        Command::Pretrain { train, loss, .. } => {
            if let Some(phases) = &train.phases {
                cfg.train.phases = phases.clone();
            }
            if let Some(mode) = loss {
                cfg.loss.mode = *mode;
            }
        }
        Command::Finetune { train, .. } => {
            if let Some(phases) = &train.phases {
                cfg.train.phases = phases.clone();
            }
        }
        _ => {}
    }
    cfg.validate()
        .map_err(|e| CliError::config(config_class(&e), e.to_string()))?;
    Ok(cfg)
}

fn config_class(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config.invalid",
        other => other.class(),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    commands: BTreeMap<String, ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    config_sha256: String,
    seed: u64,
    /// Artifact path relative to the output directory → sha256.
    artifacts: BTreeMap<String, String>,
}

fn record_manifest(cfg: &ExperimentConfig, command: &str, artifacts: &[PathBuf]) -> CliResult<()> {
    let out = &cfg.out_dir;
    let mut files = Vec::new();
    for a in artifacts {
        if a.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(a)
                .map_err(Error::from)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()
                .map_err(Error::from)?;
            entries.sort();
            files.extend(entries);
        } else {
            files.push(a.clone());
        }
    }
    let mut checksums = BTreeMap::new();
    for f in files {
        let rel = f.strip_prefix(out).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        checksums.insert(rel, sha256_hex(&fs::read(&f).map_err(Error::from)?));
    }
    let path = out.join("manifest.json");
    let mut manifest: Manifest = match fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_default(),
        Err(_) => Manifest::default(),
    };
    manifest.commands.insert(
        command.to_string(),
        ManifestEntry {
            config_sha256: sha256_hex(&serde_json::to_vec(cfg).map_err(Error::from)?),
            seed: cfg.seed,
            artifacts: checksums,
        },
    );
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::from)? + "\n";
    fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

fn data_dir(cfg: &ExperimentConfig, args: &DataArgs) -> PathBuf {
    args.data.clone().unwrap_or_else(|| cfg.out_dir.join("dataset"))
}

fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    if !dir.join("dataset.json").is_file() {
        return Err(CliError::config(
            "config.missing_path",
            format!("no dataset at {} (run `generate` first)", dir.display()),
        ));
    }
    Ok(Dataset::load(dir)?)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::config(
            "config.missing_path",
            format!("checkpoint {} does not exist", path.display()),
        ));
    }
    Ok(Checkpoint::load(path)?)
}

fn write_curve(curve: &[f64], path: &Path) -> crate::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in curve.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Config echo stored in checkpoints and reports.
fn echo(cfg: &ExperimentConfig, loss_curve: &[f64]) -> serde_json::Value {
    serde_json::json!({ "experiment": cfg, "loss_curve": loss_curve })
}

fn execute(cli: &Cli, cfg: &ExperimentConfig) -> CliResult<Vec<PathBuf>> {
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(Error::from)?;
    match &cli.command {
        Command::Generate => {
            let dir = out.join("dataset");
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(Error::from)?;
            }
            Dataset::build(&cfg.dataset, cfg.seed)?.save(&dir, cfg.seed)?;
            Ok(vec![dir])
        }
        Command::Pretrain { data, .. } => {
            let dataset = load_dataset(&data_dir(cfg, data))?;
            let result = pretrain(&dataset, &cfg.train, &cfg.loss, cfg.seed)?;
            let ckpt = out.join("pretrain.ckpt");
            let csv = out.join("pretrain_loss.csv");
            let steps = result.loss_curve.len() as u64;
            Checkpoint::new(result.network, steps, echo(cfg, &result.loss_curve)).save(&ckpt)?;
            write_curve(&result.loss_curve, &csv)?;
            Ok(vec![ckpt, csv])
        }
        Command::Finetune { data, checkpoint, .. } => {
            let dataset = load_dataset(&data_dir(cfg, data))?;
            let init = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let result = finetune(&dataset, init.as_ref().map(|c| &c.network), &cfg.train, cfg.seed)?;
            let ckpt = out.join("model.ckpt");
            let csv = out.join("finetune_loss.csv");
            let steps = result.loss_curve.len() as u64;
            Checkpoint::new(result.network, steps, echo(cfg, &result.loss_curve)).save(&ckpt)?;
            write_curve(&result.loss_curve, &csv)?;
            Ok(vec![ckpt, csv])
        }
        Command::Evaluate { data, checkpoint } => {
            let dataset = load_dataset(&data_dir(cfg, data))?;
            let path = checkpoint.clone().unwrap_or_else(|| out.join("model.ckpt"));
            let ckpt = load_checkpoint(&path)?;
            let net = &ckpt.network;
            if net.seg_head.is_none() {
                return Err(CliError::config(
                    "config.invalid",
                    format!("{} has no segmentation head (run `finetune`)", path.display()),
                ));
            }
            let size = cfg.train.patch_size;
            let evaluation = evaluate(net, &dataset.test, &dataset.organs(), size)?;
            let patches = embedding_patches(&dataset, cfg.train.patches_per_organ, size, cfg.seed)?;
            let silhouette = silhouette_by_organ(&embed_records(net, &patches)?);
            let loss_curve: Vec<f64> = ckpt
                .header
                .config
                .get("loss_curve")
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .unwrap_or_default();
            let config = serde_json::to_value(cfg).map_err(Error::from)?;
            let report = MetricsReport::new(&evaluation, loss_curve, silhouette, config, cfg.seed);
            emit_report(&report, out, "report")?;
            println!("mean Dice {:.4}", report.mean_dice);
            Ok(vec![out.join("report.json"), out.join("report.csv")])
        }
        Command::Embed { data, checkpoint } => {
            let dataset = load_dataset(&data_dir(cfg, data))?;
            let path = checkpoint.clone().unwrap_or_else(|| out.join("pretrain.ckpt"));
            let ckpt = load_checkpoint(&path)?;
            let size = cfg.train.patch_size;
            let patches = embedding_patches(&dataset, cfg.train.patches_per_organ, size, cfg.seed)?;
            let records = embed_records(&ckpt.network, &patches)?;
            let emb = out.join("embeddings.csv");
            write_embeddings_csv(&records, &emb)?;
            let pca = out.join("pca.csv");
            write_pca(&records, &pca)?;
            Ok(vec![emb, pca])
        }
        Command::Sweep { data, temps } => {
            let dataset = load_dataset(&data_dir(cfg, data))?;
            let temps = temps.clone().unwrap_or_else(|| DEFAULT_TEMPERATURES.to_vec());
            if let Some(t) = temps.iter().find(|t| !(**t > 0.0)) {
                return Err(CliError::config("dcc.temperature", format!("temperature must be positive, got {t}")));
            }
            let rows = temperature_sweep(&dataset, &cfg.train, &temps, &[cfg.seed])?;
            let csv = out.join("sweep.csv");
            write_sweep_csv(&rows, &csv)?;
            Ok(vec![csv])
        }
    }
}

/// Per-organ two-component PCA: `organ,phase,d,pc_0,pc_1`.
fn write_pca(records: &[crate::analysis::EmbeddingRecord], path: &Path) -> crate::Result<()> {
    let mut by: BTreeMap<u8, Vec<&crate::analysis::EmbeddingRecord>> = BTreeMap::new();
    for r in records {
        by.entry(r.organ).or_default().push(r);
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["organ", "phase", "d", "pc_0", "pc_1"])?;
    for (organ, rs) in by {
        let points: Vec<Vec<f64>> = rs.iter().map(|r| r.z.clone()).collect();
        let Ok(pca) = pca_project(&points, 2) else {
            log::warn!("organ {organ}: too few records for PCA");
            continue;
        };
        for (r, c) in rs.iter().zip(&pca.coords) {
            w.write_record([
                organ.to_string(),
                r.phase.to_string(),
                r.d.to_string(),
                c[0].to_string(),
                c[1].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses, runs, and reports. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = resolve(&cli).and_then(|cfg| {
        let artifacts = execute(&cli, &cfg)?;
        record_manifest(&cfg, cli.command.name(), &artifacts)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let message = e.message.replace('\n', " ");
            eprintln!("error[{}]: {message}", e.class);
            e.code
        }
    }
}
