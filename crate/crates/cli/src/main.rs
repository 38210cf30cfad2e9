//! `wegpipe`: generate data, train, pseudo-label, evaluate and compare.
//!
//! Exit codes: 0 on success, 1 on a fatal error, 3 when a batch command
//! finished but some images failed or were missing.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wegpipe::explain::{BlockSet, Explainer};
use wegpipe::pipeline::{
    cmd_compare, cmd_eval, cmd_gen_data, cmd_pseudo_label, cmd_train, metrics_path,
    PipelineConfig,
};
use wegpipe::Result;

const PARTIAL_FAILURE: u8 = 3;

#[derive(Parser)]
#[command(name = "wegpipe", version, about = "Pseudo segmentation labels from a ViT classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shapes split.
    GenData(Common),
    /// Train the classifier on a dataset split.
    Train(Common),
    /// Generate pseudo labels for every image of a split.
    PseudoLabel(Common),
    /// Score predicted masks against ground-truth masks.
    Eval(EvalArgs),
    /// Run the labeling pipeline with each explainer and report mIoU.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// JSON pipeline config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset split directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Weight file prefix.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Output directory for labels and reports.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Number of images for gen-data.
    #[arg(long)]
    num_samples: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// dtd, rollout or cam.
    #[arg(long)]
    explainer: Option<Explainer>,
    /// `last`, `all` or a comma-separated list of block indices.
    #[arg(long)]
    blocks: Option<String>,
    /// Soft-erase rate in (0, 1]; 1 disables soft erase.
    #[arg(long)]
    sr: Option<f64>,
    #[arg(long)]
    fg_thr: Option<f64>,
    #[arg(long)]
    tau_sal: Option<f64>,
    /// Skip EPOM refinement.
    #[arg(long)]
    no_epom: bool,
    /// Label without saliency gating.
    #[arg(long)]
    no_saliency: bool,
    /// Keep negative gradient-relevance products.
    #[arg(long)]
    no_positive_clamp: bool,
    /// Fuse maps from input scales 0.75, 1 and 1.25.
    #[arg(long)]
    multi_scale: bool,
    /// Resize model input so its long side has this many pixels.
    #[arg(long)]
    long_side: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted `mask_XXXX.pgm` files.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth `mask_XXXX.pgm` files.
    #[arg(long)]
    gt: PathBuf,
    /// Defaults to `num_classes` in the ground-truth `labels.json`.
    #[arg(long)]
    num_classes: Option<usize>,
    /// Also write the report to this file.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::from_json_file(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(p) = &self.dataset {
            cfg.dataset_dir = p.clone();
        }
        if let Some(p) = &self.weights {
            cfg.weights = p.clone();
        }
        if let Some(p) = &self.output {
            cfg.output_dir = p.clone();
        }
        if let Some(n) = self.num_samples {
            cfg.num_samples = n;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        let lab = &mut cfg.labeling;
        if let Some(e) = self.explainer {
            lab.explainer = e;
        }
        if let Some(b) = &self.blocks {
            lab.relevance.blocks = BlockSet::parse(b)?;
        }
        if let Some(sr) = self.sr {
            lab.soft_erase_rate = sr;
        }
        if let Some(t) = self.fg_thr {
            lab.epom.fg_thr = t;
        }
        if let Some(t) = self.tau_sal {
            lab.epom.tau_sal = t;
        }
        if self.no_epom {
            lab.use_epom = false;
        }
        if self.no_saliency {
            lab.use_saliency = false;
        }
        if self.no_positive_clamp {
            lab.relevance.positive_clamp = false;
        }
        if self.multi_scale {
            lab.multi_scale = true;
        }
        if let Some(l) = self.long_side {
            lab.long_side = Some(l);
        }
        lab.validate()?;
        Ok(cfg)
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let ok = ExitCode::SUCCESS;
    match cli.command {
        Command::GenData(args) => {
            let cfg = args.resolve()?;
            let n = cmd_gen_data(&cfg)?;
            println!("wrote {n} samples to {}", cfg.dataset_dir.display());
            Ok(ok)
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let report = cmd_train(&cfg)?;
            for e in &report.epochs {
                println!("epoch {:>3}  loss {:.6}  accuracy {:.4}", e.epoch, e.loss, e.accuracy);
            }
            println!("metrics written to {}", metrics_path(&cfg.weights).display());
            Ok(ok)
        }
        Command::PseudoLabel(args) => {
            let cfg = args.resolve()?;
            let summary = cmd_pseudo_label(&cfg)?;
            println!("labeled {} images into {}", summary.processed, cfg.output_dir.display());
            for (id, err) in &summary.failures {
                eprintln!("image {id}: {err}");
            }
            Ok(if summary.failures.is_empty() {
                ok
            } else {
                ExitCode::from(PARTIAL_FAILURE)
            })
        }
        Command::Eval(args) => {
            let report = cmd_eval(&args.pred, &args.gt, args.num_classes)?;
            if let Some(path) = &args.output {
                let text = serde_json::to_string_pretty(&report)? + "\n";
                std::fs::write(path, text).map_err(|e| wegpipe::Error::File {
                    path: path.clone(),
                    source: e,
                })?;
            }
            print_json(&serde_json::to_value(&report)?)?;
            for name in &report.missing {
                eprintln!("missing prediction: {name}");
            }
            Ok(if report.missing.is_empty() {
                ok
            } else {
                ExitCode::from(PARTIAL_FAILURE)
            })
        }
        Command::Compare(args) => {
            let cfg = args.resolve()?;
            let report = cmd_compare(&cfg)?;
            print_json(&serde_json::to_value(&report)?)?;
            Ok(if report.failures == 0 {
                ok
            } else {
                ExitCode::from(PARTIAL_FAILURE)
            })
        }
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("WEGPIPE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| wegpipe::Error::Config(format!("WEGPIPE_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| wegpipe::Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
