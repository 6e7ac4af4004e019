//! `dermoscan` command line: ingest, split, train, eval, sweep, serve.
//!
//! Every artifact written is announced on stdout as one JSON line
//! `{"artifact": "<path>"}`; effective settings go to stderr at startup.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use dermoscan_core::metrics::{class_metrics, confusion_matrix, roc_curve, threshold_grid, threshold_sweep, PredictionSet};
use dermoscan_core::split::{split_dataset, split_grouped, SplitManifest, DEFAULT_SEED, DEFAULT_VALID_FRACTION};
use dermoscan_core::Taxonomy;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::data::{StagedImages, DEFAULT_CACHE_BYTES};
use crate::evaluate::{predict, predict_tta_set, scored_against};
use crate::ingest::{build_class_folders, class_counts, read_manifest, read_metadata, serialize_metadata, write_manifest, Corpus};
use crate::report::{render_report, sweep_csv, Report};
use crate::service::{discover_checkpoints, start, ServiceConfig};
use crate::train::{train, write_predictions, TrainConfig, CONFIG_FILE};
use crate::zoo::ArchitectureId;

#[derive(Debug, Parser)]
#[command(name = "dermoscan", version, about = "Skin lesion classifier training, evaluation and serving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate metadata, report class counts and build class folders.
    Ingest(IngestArgs),
    /// Seeded train/validation split of the metadata's image ids.
    Split(SplitArgs),
    /// Fine-tune a model; flags override the config file.
    Train(TrainArgs),
    /// Seven-class report on the validation split.
    Eval(EvalArgs),
    /// Benign/malignant operating points over a threshold grid.
    Sweep(SweepArgs),
    /// Serve checkpoints over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub metadata: PathBuf,
    /// Directories searched for `<image_id>.jpg|.jpeg|.png`.
    #[arg(long, num_args = 1..)]
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub metadata: PathBuf,
    #[arg(long = "val-frac", default_value_t = DEFAULT_VALID_FRACTION)]
    pub val_frac: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep all images of one lesion on the same side of the split.
    #[arg(long)]
    pub group_by_lesion: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long = "mixup-alpha")]
    pub mixup_alpha: Option<f64>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Views per image; 0 is the plain prediction.
    #[arg(long, default_value_t = 0)]
    pub tta: usize,
    #[arg(long = "report-dir")]
    pub report_dir: PathBuf,
    /// Class-folder corpus; defaults to the one recorded at training time.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long = "grid-step", default_value_t = 0.01)]
    pub grid_step: f64,
    /// CSV output; the same sweep is also written as JSON next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub tta: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// A checkpoint directory or a directory of them.
    #[arg(long = "ckpt-dir")]
    pub ckpt_dir: Option<PathBuf>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub host: Option<String>,
    /// JSON service config; its fields override environment settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub artifacts_written: Vec<PathBuf>,
}

struct Artifacts(Vec<PathBuf>);

impl Artifacts {
    fn add(&mut self, path: impl Into<PathBuf>) {
        let path = path.into();
        println!("{}", serde_json::json!({ "artifact": path }));
        self.0.push(path);
    }
}

fn announce<T: Serialize>(command: &str, settings: &T) {
    eprintln!("{command} settings: {}", serde_json::to_string(settings).unwrap_or_default());
}

/// Parse `argv` (including the program name) and run the command.
pub fn run<I, T>(argv: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return CommandResult {
                exit_code: if e.use_stderr() { 2 } else { 0 },
                artifacts_written: Vec::new(),
            };
        }
    };
    let mut artifacts = Artifacts(Vec::new());
    let outcome = match cli.command {
        Command::Ingest(a) => ingest(a, &mut artifacts),
        Command::Split(a) => split(a, &mut artifacts),
        Command::Train(a) => train_cmd(a, &mut artifacts),
        Command::Eval(a) => eval(a, &mut artifacts),
        Command::Sweep(a) => sweep(a, &mut artifacts),
        Command::Serve(a) => serve(a),
    };
    let exit_code = match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            1
        }
    };
    CommandResult {
        exit_code,
        artifacts_written: artifacts.0,
    }
}

/// The error chain joined with `: `, skipping causes already quoted by
/// the message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn write_text(path: &Path, text: &str, artifacts: &mut Artifacts) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    artifacts.add(path);
    Ok(())
}

fn ingest(a: IngestArgs, artifacts: &mut Artifacts) -> anyhow::Result<()> {
    announce("ingest", &serde_json::json!({ "metadata": a.metadata, "images": a.images, "out": a.out }));
    let records = read_metadata(&a.metadata)?;
    let counts = class_counts(&records);
    let counts_json: serde_json::Map<String, serde_json::Value> = counts
        .iter()
        .map(|(l, c)| (l.code().to_string(), serde_json::Value::from(*c)))
        .collect();
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    write_text(&a.out.join("class_counts.json"), &(serde_json::to_string_pretty(&counts_json)? + "\n"), artifacts)?;
    write_text(&a.out.join("metadata.csv"), &serialize_metadata(&records)?, artifacts)?;
    if !a.images.is_empty() {
        let report = build_class_folders(&records, &a.images, &a.out)?;
        eprintln!("copied {} images, {} missing", report.copied, report.missing.len());
        let mut missing = report.missing.join("\n");
        if !missing.is_empty() {
            missing.push('\n');
        }
        write_text(&a.out.join("missing_images.txt"), &missing, artifacts)?;
    }
    Ok(())
}

fn split(a: SplitArgs, artifacts: &mut Artifacts) -> anyhow::Result<()> {
    announce(
        "split",
        &serde_json::json!({ "metadata": a.metadata, "val_frac": a.val_frac, "seed": a.seed, "out": a.out, "group_by_lesion": a.group_by_lesion }),
    );
    let records = read_metadata(&a.metadata)?;
    let manifest = if a.group_by_lesion {
        let items: Vec<(&str, &str)> = records
            .iter()
            .map(|r| (r.image_id.as_str(), if r.lesion_id.is_empty() { r.image_id.as_str() } else { r.lesion_id.as_str() }))
            .collect();
        split_grouped(&items, a.val_frac, a.seed)?
    } else {
        let ids: Vec<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
        split_dataset(&ids, a.val_frac, a.seed)?
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_manifest(&manifest, &a.out)?;
    eprintln!("{} train / {} valid", manifest.train_ids.len(), manifest.valid_ids.len());
    artifacts.add(&a.out);
    Ok(())
}

fn train_cmd(a: TrainArgs, artifacts: &mut Artifacts) -> anyhow::Result<()> {
    let mut config = match &a.config {
        Some(path) => TrainConfig::load(path).with_context(|| format!("cannot load training config {}", path.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(arch) = &a.arch {
        config.arch = arch.parse::<ArchitectureId>()?;
    }
    if let Some(v) = a.epochs {
        config.epochs = v;
        config.frozen_epochs = config.frozen_epochs.min(v);
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.mixup_alpha {
        config.policy.mixup_alpha = v;
    }
    if let Some(v) = a.out {
        config.checkpoint_dir = v;
    }
    if let Some(v) = a.split {
        config.manifest = Some(v);
    }
    if let Some(v) = a.corpus {
        config.corpus_dir = Some(v);
    }
    announce("train", &config);
    let Some(manifest_path) = &config.manifest else {
        bail!("no split manifest given (--split or `manifest` in the config)");
    };
    let Some(corpus_dir) = &config.corpus_dir else {
        bail!("no corpus given (--corpus or `corpus_dir` in the config)");
    };
    let manifest = read_manifest(manifest_path)?;
    let corpus = Corpus::scan(corpus_dir)?;
    let outcome = train(&config, &manifest, &corpus)?;
    for p in outcome.artifacts {
        artifacts.add(p);
    }
    if let Some(best) = outcome.best_epoch {
        eprintln!("kept weights from epoch {best}");
    }
    Ok(())
}

/// Corpus from the flag, else the one recorded next to the checkpoint.
fn resolve_corpus(flag: Option<PathBuf>, ckpt: &Path) -> anyhow::Result<Corpus> {
    let dir = match flag {
        Some(d) => d,
        None => TrainConfig::load(&ckpt.join(CONFIG_FILE))
            .ok()
            .and_then(|c| c.corpus_dir)
            .context("no --corpus given and the checkpoint does not record one")?,
    };
    Ok(Corpus::scan(&dir)?)
}

fn validation_predictions(
    ckpt: &Checkpoint,
    manifest: &SplitManifest,
    corpus: &Corpus,
    tta: usize,
    seed: u64,
) -> anyhow::Result<PredictionSet> {
    let valid_only = SplitManifest {
        train_ids: Vec::new(),
        ..manifest.clone()
    };
    corpus.require(&valid_only)?;
    let policy = ckpt.meta.effective_policy();
    let mut staged = StagedImages::new(corpus, policy.presize_to, DEFAULT_CACHE_BYTES);
    let images = manifest
        .valid_ids
        .iter()
        .map(|id| Ok((id.clone(), staged.get(id)?)))
        .collect::<crate::Result<Vec<_>>>()?;
    let id = &ckpt.meta.model_id;
    Ok(if tta == 0 {
        predict(&ckpt.network, &images, &policy, id)?
    } else {
        predict_tta_set(&ckpt.network, &images, &policy, tta, seed, id)?
    })
}

fn eval(a: EvalArgs, artifacts: &mut Artifacts) -> anyhow::Result<()> {
    announce("eval", &serde_json::json!({ "ckpt": a.ckpt, "split": a.split, "tta": a.tta, "report_dir": a.report_dir, "corpus": a.corpus, "seed": a.seed, "grid_step": 0.01 }));
    let ckpt = load_checkpoint(&a.ckpt)?;
    let manifest = read_manifest(&a.split)?;
    let corpus = resolve_corpus(a.corpus, &a.ckpt)?;
    let preds = validation_predictions(&ckpt, &manifest, &corpus, a.tta, a.seed)?;
    let truths = corpus.labels();
    let cm = confusion_matrix(&preds, &truths)?;
    let metrics = class_metrics(&cm);
    let samples = scored_against(&preds, &truths, &ckpt.meta.taxonomy)?;
    let sweep = threshold_sweep(&samples, &threshold_grid(0.01))?;
    let roc = roc_curve(&samples);
    let report = Report {
        model_id: &preds.model_id,
        tta_n: preds.tta_n,
        cm: &cm,
        metrics: &metrics,
        sweep: &sweep,
        roc: &roc,
    };
    for p in render_report(&report, &a.report_dir)? {
        artifacts.add(p);
    }
    let pred_path = a.report_dir.join("predictions.json");
    write_predictions(&preds, &pred_path)?;
    artifacts.add(pred_path);
    Ok(())
}

fn sweep(a: SweepArgs, artifacts: &mut Artifacts) -> anyhow::Result<()> {
    announce("sweep", &serde_json::json!({ "ckpt": a.ckpt, "split": a.split, "grid_step": a.grid_step, "out": a.out, "corpus": a.corpus, "tta": a.tta, "seed": a.seed }));
    if !(a.grid_step > 0.0 && a.grid_step <= 1.0) {
        bail!("--grid-step must lie in (0, 1]");
    }
    let ckpt = load_checkpoint(&a.ckpt)?;
    let manifest = read_manifest(&a.split)?;
    let corpus = resolve_corpus(a.corpus, &a.ckpt)?;
    let preds = validation_predictions(&ckpt, &manifest, &corpus, a.tta, a.seed)?;
    let taxonomy: Taxonomy = ckpt.meta.taxonomy;
    let samples = scored_against(&preds, &corpus.labels(), &taxonomy)?;
    let result = threshold_sweep(&samples, &threshold_grid(a.grid_step))?;
    write_text(&a.out, &sweep_csv(&result), artifacts)?;
    write_text(&a.out.with_extension("json"), &(serde_json::to_string_pretty(&result)? + "\n"), artifacts)?;
    eprintln!("auc {:.4}", result.auc);
    Ok(())
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let mut config = ServiceConfig::resolve(a.config.as_deref())?;
    if let Some(dir) = &a.ckpt_dir {
        config.checkpoint_paths = discover_checkpoints(dir)?;
    }
    if let Some(p) = a.port {
        config.port = p;
    }
    if let Some(t) = a.threshold {
        config.default_threshold = t;
    }
    if let Some(h) = a.host {
        config.host = h;
    }
    announce("serve", &config);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let handle = start(config).await?;
        eprintln!("listening on http://{}", handle.local_addr);
        handle.run_until_ctrl_c().await?;
        anyhow::Ok(())
    })
}
