//! `sst` — single entry point for the whole pipeline: corpus generation,
//! universal and dedicated training, evaluation, inference export, the
//! component ablation, and prediction rendering.
//!
//! A JSON config file (see [`FileConfig`]) is the source of truth; every
//! flag overrides the corresponding config field and the fully resolved
//! configuration is echoed into each output artifact.  Exit codes: 0 on
//! success, 2 for usage/config mistakes, 1 for runtime failures.

use std::fs;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use sst_core::checkpoint::{load_checkpoint, save_checkpoint};
use sst_core::dataset::{image_to_tensor, Dataset, Split};
use sst_core::error::SstError;
use sst_core::eval::{ablate, evaluate, export_inference, format_ablation, render};
use sst_core::imgio::{read_ppm, write_ppm};
use sst_core::net::predict;
use sst_core::synth::{builtin_registry, generate_dataset, GenConfig};
use sst_core::trainer::{
    dedicated_transfer, train_universal, AuxMode, PairStrategy, TrainConfig, TransferSpec,
};

#[derive(Parser)]
#[command(name = "sst", version, about = "Scalable semantic transfer for multi-domain human parsing", long_about = None)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// `on`/`off` master switch for the semantic-transfer components.
#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Flags mirroring the training hyperparameters 1:1; every one overrides
/// the same-named field under `train` in the config file.
#[derive(Debug, Args)]
struct TrainOverrides {
    /// Segmentation loss weight (config: train.alpha)
    #[arg(long)]
    alpha: Option<f64>,
    /// Auxiliary loss weight (config: train.beta)
    #[arg(long)]
    beta: Option<f64>,
    /// Consistency loss weight (config: train.lambda)
    #[arg(long)]
    lambda: Option<f64>,
    /// Training epochs (config: train.epochs)
    #[arg(long)]
    epochs: Option<usize>,
    /// Embedding width of the aggregation/embedding modules (config: train.dim)
    #[arg(long)]
    dim: Option<usize>,
    /// Initial learning rate (config: train.base_lr)
    #[arg(long)]
    base_lr: Option<f64>,
    /// 1-based epoch at which the learning rate drops; defaults to 5/6 of
    /// the run (config: train.lr_drop_epoch)
    #[arg(long)]
    lr_drop_epoch: Option<usize>,
    /// Learning-rate multiplier applied from the drop epoch on (config:
    /// train.lr_drop_factor)
    #[arg(long)]
    lr_drop_factor: Option<f64>,
    /// Images per domain per step (config: train.batch_per_domain)
    #[arg(long)]
    batch_per_domain: Option<usize>,
    /// Master seed for all randomness (config: train.seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated domain ids to train; empty means every registered
    /// domain, coarsest first (config: train.domains)
    #[arg(long, value_delimiter = ',')]
    domains: Option<Vec<String>>,
    /// Auxiliary-loss mode: off, unmasked or masked (config: train.aux_loss)
    #[arg(long)]
    aux_loss: Option<AuxMode>,
    /// Dataset-level consistency loss (config: train.scr_dataset)
    #[arg(long)]
    scr_dataset: Option<bool>,
    /// Image-level consistency loss (config: train.scr_image)
    #[arg(long)]
    scr_image: Option<bool>,
    /// Random rescale/flip augmentation (config: train.augment)
    #[arg(long)]
    augment: Option<bool>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.dim {
            cfg.dim = v;
        }
        if let Some(v) = self.base_lr {
            cfg.base_lr = v;
        }
        if let Some(v) = self.lr_drop_epoch {
            cfg.lr_drop_epoch = Some(v);
        }
        if let Some(v) = self.lr_drop_factor {
            cfg.lr_drop_factor = v;
        }
        if let Some(v) = self.batch_per_domain {
            cfg.batch_per_domain = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.domains {
            cfg.domains = v.clone();
        }
        if let Some(v) = self.aux_loss {
            cfg.aux_loss = v;
        }
        if let Some(v) = self.scr_dataset {
            cfg.scr_dataset = v;
        }
        if let Some(v) = self.scr_image {
            cfg.scr_image = v;
        }
        if let Some(v) = self.augment {
            cfg.augment = v;
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multi-domain corpus
    GenData {
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// JSON config file with generation settings (count, canvas, seed,
        /// train_fraction); flags below override it
        #[arg(long)]
        config: Option<PathBuf>,
        /// Total sample count across both splits (config: count)
        #[arg(long)]
        count: Option<usize>,
        /// Generator seed (config: seed)
        #[arg(long)]
        seed: Option<u64>,
        /// Canvas size as HxW, e.g. 48x48 (config: canvas)
        #[arg(long)]
        canvas: Option<String>,
        /// Fraction of samples in the train split (config: train_fraction)
        #[arg(long)]
        train_fraction: Option<f64>,
    },
    /// Train the universal model on several label domains at once
    TrainUniversal {
        /// JSON config file; source of truth, flags override
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (config: data)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoint, log and resolved config
        /// (config: out)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Domain pairing: full or progressive (config: train.strategy)
        #[arg(long)]
        strategy: Option<PairStrategy>,
        /// off disables every transfer component (auxiliary loss and both
        /// consistency losses), leaving the plain multi-dataset baseline
        #[arg(long)]
        sst: Option<OnOff>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Transfer a pretrained single-domain model to a new label domain
    TrainDedicated {
        /// JSON config file; source of truth, flags override
        #[arg(long)]
        config: Option<PathBuf>,
        /// Teacher checkpoint directory (config: pretrain_ckpt)
        #[arg(long)]
        pretrain_ckpt: Option<PathBuf>,
        /// Dataset directory (config: data)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Domain the teacher was trained on; inferred from the teacher
        /// checkpoint when it trained exactly one (config: source)
        #[arg(long)]
        source: Option<String>,
        /// Domain to transfer to (config: target)
        #[arg(long)]
        target: Option<String>,
        /// Fraction of the target train split to use, in (0, 1]
        /// (config: retain_frac)
        #[arg(long)]
        retain_frac: Option<f64>,
        /// Output directory for checkpoint, log and resolved config
        /// (config: out)
        #[arg(long)]
        out: Option<PathBuf>,
        /// off drops the transfer machinery: plain fine-tune baseline
        #[arg(long)]
        sst: Option<OnOff>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Evaluate one domain head over a dataset split
    Eval {
        /// Checkpoint directory
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Domain to evaluate
        #[arg(long)]
        domain: String,
        /// Split to evaluate on
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Write the JSON report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Strip a checkpoint to core + selected heads for inference
    Export {
        /// Checkpoint directory
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated domain ids whose heads to keep
        #[arg(long, value_delimiter = ',', required = true)]
        domains: Vec<String>,
        /// Output checkpoint directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and compare all six component-ablation rows
    Ablate {
        /// JSON config file; source of truth, flags override
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (config: data)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for rows.json and table.txt (config: out)
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Predict one image and write a palette-colored label map
    Render {
        /// Checkpoint directory
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image (PPM)
        #[arg(long)]
        image: PathBuf,
        /// Domain whose head produces the prediction
        #[arg(long)]
        domain: String,
        /// Output PPM path
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory supplying the palette registry; defaults to
        /// the builtin synthetic registry
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

/// Schema of the JSON config files accepted by the training subcommands.
/// Unknown keys are rejected.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    /// Dataset directory.
    data: Option<PathBuf>,
    /// Output directory.
    out: Option<PathBuf>,
    /// Teacher checkpoint for dedicated transfer.
    pretrain_ckpt: Option<PathBuf>,
    /// Source domain for dedicated transfer.
    source: Option<String>,
    /// Target domain for dedicated transfer.
    target: Option<String>,
    /// Retained fraction of the target train split.
    retain_frac: Option<f64>,
    /// Training hyperparameters.
    train: TrainConfig,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    SstError::Config(msg.into()).into()
}

/// Surface a bad user-supplied path as a usage error up front, so exit
/// code 2 distinguishes it from runtime I/O failures.
fn require_exists(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

fn load_file_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    require_exists(path, "config file")?;
    let text = fs::read_to_string(path).map_err(|e| SstError::io(path, e))?;
    Ok(serde_json::from_str(&text)
        .map_err(|e| SstError::format(path, format!("config parse error: {e}")))?)
}

fn open_dataset(path: &Path) -> anyhow::Result<Dataset> {
    require_exists(path, "dataset directory")?;
    Ok(Dataset::open(path)?)
}

fn parse_canvas(s: &str) -> anyhow::Result<(usize, usize)> {
    let parsed = s
        .split_once(['x', 'X'])
        .and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)));
    parsed.ok_or_else(|| usage(format!("canvas '{s}' is not of the form HxW, e.g. 48x48")))
}

/// Open `dir/train_log.jsonl` for the per-epoch log stream.
fn open_log(dir: &Path) -> anyhow::Result<BufWriter<File>> {
    let path = dir.join("train_log.jsonl");
    Ok(BufWriter::new(
        File::create(&path).map_err(|e| SstError::io(&path, e))?,
    ))
}

/// Write the fully resolved run configuration next to the artifacts.
fn write_config_echo(dir: &Path, echo: &serde_json::Value) -> anyhow::Result<()> {
    let path = dir.join("config.json");
    let mut text = serde_json::to_string_pretty(echo).expect("config serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| SstError::io(&path, e))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Single line, chained with ": " so scripts can parse it.
            eprintln!("error: {err:#}");
            // Checkpoint-shaped complaints mean the caller pointed us at the
            // wrong artifact, which is a usage problem too.
            let is_usage = err.downcast_ref::<SstError>().is_some_and(|e| {
                e.is_usage() || matches!(e, SstError::Checkpoint(_))
            });
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::GenData {
            out,
            config,
            count,
            seed,
            canvas,
            train_fraction,
        } => {
            let mut cfg: GenConfig = match &config {
                None => GenConfig::default(),
                Some(path) => {
                    require_exists(path, "config file")?;
                    let text = fs::read_to_string(path).map_err(|e| SstError::io(path, e))?;
                    serde_json::from_str(&text)
                        .map_err(|e| SstError::format(path, format!("config parse error: {e}")))?
                }
            };
            if let Some(v) = count {
                cfg.count = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = &canvas {
                cfg.canvas = parse_canvas(v)?;
            }
            if let Some(v) = train_fraction {
                cfg.train_fraction = v;
            }
            let manifest = generate_dataset(&out, &cfg)?;
            println!(
                "generated {} samples ({} domains) at {}",
                manifest.samples.len(),
                manifest.domains.len(),
                out.display()
            );
            Ok(())
        }

        Cmd::TrainUniversal {
            config,
            data,
            out,
            strategy,
            sst,
            overrides,
        } => {
            let mut fc = load_file_config(config.as_deref())?;
            if let Some(v) = data {
                fc.data = Some(v);
            }
            if let Some(v) = out {
                fc.out = Some(v);
            }
            if let Some(v) = strategy {
                fc.train.strategy = v;
            }
            overrides.apply(&mut fc.train);
            if sst == Some(OnOff::Off) {
                fc.train = fc.train.without_sst();
            }
            let data = fc
                .data
                .ok_or_else(|| usage("train-universal: --data (or config `data`) is required"))?;
            let out = fc
                .out
                .ok_or_else(|| usage("train-universal: --out (or config `out`) is required"))?;

            let ds = open_dataset(&data)?;
            fs::create_dir_all(&out).map_err(|e| SstError::io(&out, e))?;
            let mut log = open_log(&out)?;
            let outcome = train_universal(&ds, &fc.train, Some(&mut log))?;
            log.flush().map_err(|e| SstError::io(&out, e))?;
            save_checkpoint(&out, &outcome.store, &outcome.meta)?;

            let mut echo = outcome.meta.config.clone();
            echo["data"] = json!(data.display().to_string());
            echo["out"] = json!(out.display().to_string());
            write_config_echo(&out, &echo)?;

            let last = outcome.logs.last().context("no epochs trained")?;
            println!(
                "trained {} epochs; final loss {:.6}; checkpoint at {}",
                outcome.logs.len(),
                last.total,
                out.display()
            );
            Ok(())
        }

        Cmd::TrainDedicated {
            config,
            pretrain_ckpt,
            data,
            source,
            target,
            retain_frac,
            out,
            sst,
            overrides,
        } => {
            let mut fc = load_file_config(config.as_deref())?;
            if let Some(v) = pretrain_ckpt {
                fc.pretrain_ckpt = Some(v);
            }
            if let Some(v) = data {
                fc.data = Some(v);
            }
            if let Some(v) = source {
                fc.source = Some(v);
            }
            if let Some(v) = target {
                fc.target = Some(v);
            }
            if let Some(v) = retain_frac {
                fc.retain_frac = Some(v);
            }
            if let Some(v) = out {
                fc.out = Some(v);
            }
            overrides.apply(&mut fc.train);
            if sst == Some(OnOff::Off) {
                fc.train = fc.train.without_sst();
                fc.train.lambda = 0.0;
            }
            let ckpt = fc.pretrain_ckpt.ok_or_else(|| {
                usage("train-dedicated: --pretrain-ckpt (or config `pretrain_ckpt`) is required")
            })?;
            let data = fc
                .data
                .ok_or_else(|| usage("train-dedicated: --data (or config `data`) is required"))?;
            let target = fc
                .target
                .ok_or_else(|| usage("train-dedicated: --target (or config `target`) is required"))?;
            let out = fc
                .out
                .ok_or_else(|| usage("train-dedicated: --out (or config `out`) is required"))?;

            require_exists(&ckpt, "pretrain checkpoint")?;
            let (teacher, teacher_meta) = load_checkpoint(&ckpt)?;
            let source = match fc.source {
                Some(s) => s,
                // A single-domain teacher names its own source.
                None => match teacher_meta.config.pointer("/train/domains") {
                    Some(serde_json::Value::Array(doms)) if doms.len() == 1 => doms[0]
                        .as_str()
                        .ok_or_else(|| usage("teacher config lists a non-string domain"))?
                        .to_string(),
                    _ => {
                        return Err(usage(
                            "train-dedicated: --source is required (teacher checkpoint does not \
                             name exactly one trained domain)",
                        ))
                    }
                },
            };
            let spec = TransferSpec {
                source,
                target,
                retain_frac: fc.retain_frac.unwrap_or(1.0),
            };

            let ds = open_dataset(&data)?;
            fs::create_dir_all(&out).map_err(|e| SstError::io(&out, e))?;
            let mut log = open_log(&out)?;
            let outcome =
                dedicated_transfer(&ds, &teacher, &teacher_meta, &spec, &fc.train, Some(&mut log))?;
            log.flush().map_err(|e| SstError::io(&out, e))?;
            save_checkpoint(&out, &outcome.store, &outcome.meta)?;

            let mut echo = outcome.meta.config.clone();
            echo["data"] = json!(data.display().to_string());
            echo["out"] = json!(out.display().to_string());
            echo["pretrain_ckpt"] = json!(ckpt.display().to_string());
            write_config_echo(&out, &echo)?;

            let last = outcome.logs.last().context("no epochs trained")?;
            println!(
                "transferred {} -> {} over {} epochs; final loss {:.6}; checkpoint at {}",
                spec.source,
                spec.target,
                outcome.logs.len(),
                last.total,
                out.display()
            );
            Ok(())
        }

        Cmd::Eval {
            ckpt,
            data,
            domain,
            split,
            out,
        } => {
            require_exists(&ckpt, "checkpoint")?;
            let (store, meta) = load_checkpoint(&ckpt)?;
            let ds = open_dataset(&data)?;
            if meta.registry_hash != ds.registry.hash() {
                return Err(usage(format!(
                    "checkpoint was trained against a different domain registry \
                     (checkpoint {}, dataset {})",
                    meta.registry_hash,
                    ds.registry.hash()
                )));
            }
            let echo = json!({
                "ckpt": ckpt.display().to_string(),
                "data": data.display().to_string(),
                "domain": domain,
                "split": format!("{split:?}").to_lowercase(),
                "train": meta.config,
            });
            let report = evaluate(&ds, &store, &domain, split.into(), echo)?;
            let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
            text.push('\n');
            match out {
                Some(path) => {
                    fs::write(&path, text).map_err(|e| SstError::io(&path, e))?;
                    println!(
                        "domain {domain}: mIoU {:.4}, mean acc {:.4}; report at {}",
                        report.miou,
                        report.mean_acc,
                        path.display()
                    );
                }
                None => print!("{text}"),
            }
            Ok(())
        }

        Cmd::Export { ckpt, domains, out } => {
            require_exists(&ckpt, "checkpoint")?;
            let (store, meta) = load_checkpoint(&ckpt)?;
            let (stripped, stripped_meta) = export_inference(&store, &meta, &domains)?;
            save_checkpoint(&out, &stripped, &stripped_meta)?;
            println!(
                "exported {} of {} parameters ({} heads) to {}",
                stripped.numel(),
                store.numel(),
                domains.len(),
                out.display()
            );
            Ok(())
        }

        Cmd::Ablate {
            config,
            data,
            out,
            overrides,
        } => {
            let mut fc = load_file_config(config.as_deref())?;
            if let Some(v) = data {
                fc.data = Some(v);
            }
            if let Some(v) = out {
                fc.out = Some(v);
            }
            overrides.apply(&mut fc.train);
            let data = fc
                .data
                .ok_or_else(|| usage("ablate: --data (or config `data`) is required"))?;
            let out = fc
                .out
                .ok_or_else(|| usage("ablate: --out (or config `out`) is required"))?;

            let ds = open_dataset(&data)?;
            let rows = ablate(&ds, &fc.train)?;
            let table = format_ablation(&rows);

            fs::create_dir_all(&out).map_err(|e| SstError::io(&out, e))?;
            let echo = json!({
                "data": data.display().to_string(),
                "out": out.display().to_string(),
                "train": fc.train,
            });
            let rows_path = out.join("rows.json");
            let mut rows_text =
                serde_json::to_string_pretty(&json!({ "config": echo, "rows": rows }))
                    .expect("rows serialize");
            rows_text.push('\n');
            fs::write(&rows_path, rows_text).map_err(|e| SstError::io(&rows_path, e))?;
            let table_path = out.join("table.txt");
            fs::write(&table_path, &table).map_err(|e| SstError::io(&table_path, e))?;

            print!("{table}");
            println!("ablation artifacts at {}", out.display());
            Ok(())
        }

        Cmd::Render {
            ckpt,
            image,
            domain,
            out,
            data,
        } => {
            require_exists(&ckpt, "checkpoint")?;
            require_exists(&image, "input image")?;
            let (store, meta) = load_checkpoint(&ckpt)?;
            let registry = match &data {
                Some(dir) => open_dataset(dir)?.registry,
                None => builtin_registry(),
            };
            if meta.registry_hash != registry.hash() {
                return Err(usage(format!(
                    "checkpoint was trained against a different domain registry \
                     (checkpoint {}, palette source {})",
                    meta.registry_hash,
                    registry.hash()
                )));
            }
            let palette = &registry.domain(&domain)?.palette;
            if !store.contains(&format!("head.{domain}.w")) {
                let mut heads: Vec<&str> = store
                    .iter()
                    .filter_map(|(_, e)| e.tag.strip_prefix("head:"))
                    .collect();
                heads.sort_unstable();
                heads.dedup();
                return Err(usage(format!(
                    "checkpoint has no head for domain '{domain}' (available: {})",
                    heads.join(", ")
                )));
            }
            let img = read_ppm(&image)?;
            let pred = predict(&store, &domain, &image_to_tensor(&img))?;
            let colored = render(&pred, palette)?;
            write_ppm(&out, &colored)?;
            // A PPM has nowhere to carry the config echo; use a sidecar.
            let echo = json!({
                "ckpt": ckpt.display().to_string(),
                "image": image.display().to_string(),
                "domain": domain,
                "out": out.display().to_string(),
                "train": meta.config,
            });
            let sidecar = out.with_extension("json");
            let mut text = serde_json::to_string_pretty(&echo).expect("echo serializes");
            text.push('\n');
            fs::write(&sidecar, text).map_err(|e| SstError::io(&sidecar, e))?;
            println!("rendered {} prediction to {}", domain, out.display());
            Ok(())
        }
    }
}
