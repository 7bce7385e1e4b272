//! `slidemine` command-line interface.
//!
//! Every command prints a one-line JSON summary on success. On failure it
//! prints `{"error": kind, "message": ...}` to stderr and exits with 1 for
//! user errors (bad input, bad configuration) or 2 for internal faults.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use slidemine::evaluation::BootstrapConfig;
use slidemine::inference::Aggregation;
use slidemine::pipeline::{
    evaluate_command, generate_dataset, infer_command, initial_model, mask_command, tile_command, train_command,
    DatasetSpec, InferMode, InferOptions, Predictions, CHECKPOINT_FILE,
};
use slidemine::scorer::Checkpoint;
use slidemine::slide_store::{DatasetManifest, Split};

use config::{TilingArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "slidemine", version, about = "Weakly-supervised whole-slide image classification")]
struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true, env = "SLIDEMINE_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset from a JSON spec.
    Generate(GenerateArgs),
    /// Compute the tissue mask of one slide.
    Mask(MaskArgs),
    /// List tissue and annotation tiles of one slide.
    Tile(TileArgs),
    /// Train a tile scorer on a dataset manifest.
    Train(TrainCmdArgs),
    /// Slide-level predictions from one or two checkpoints.
    Infer(InferArgs),
    /// ROC AUC and log loss with bootstrap intervals per source.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Dataset spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct MaskArgs {
    /// Slide directory.
    #[arg(long)]
    slide: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TileArgs {
    #[arg(long)]
    slide: PathBuf,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    tiling: TilingArgs,
}

#[derive(Args, Debug)]
struct TrainCmdArgs {
    /// Dataset root or manifest file.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum Mode {
    OneStage,
    TwoStage,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint file or training output directory. In two-stage mode this
    /// is the second-stage model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// First-stage (ADC detection) checkpoint, two-stage mode only.
    #[arg(long)]
    stage1: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "one-stage")]
    mode: Mode,
    #[arg(long, default_value = "test")]
    split: Split,
    /// max, mean or quantile(q).
    #[arg(long, default_value = "max")]
    aggregation: Aggregation,
    /// Method name recorded in the predictions file.
    #[arg(long)]
    method: Option<String>,
    /// Write overlays and heatmap.json per slide here.
    #[arg(long)]
    heatmaps: Option<PathBuf>,
    /// Predictions JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Predictions files, one per method.
    #[arg(long, required = true, num_args = 1..)]
    predictions: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Invocation mistakes caught after parsing; reported like clap's own.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn load_checkpoint(path: &PathBuf) -> Result<Checkpoint> {
    let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.clone() };
    if !file.exists() {
        bail!(Usage(format!("checkpoint {} does not exist", file.display())));
    }
    Checkpoint::load(&file).with_context(|| format!("loading checkpoint {}", file.display()))
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(slidemine::Error::Argument("--workers must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Generate(a) => {
            let mut spec = DatasetSpec::load(&a.spec)?;
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            let m = generate_dataset(&spec, &a.out)?;
            Ok(json!({"command": "generate", "slides": m.entries.len(), "root": a.out}))
        }
        Command::Mask(a) => {
            let (_, summary) = mask_command(&a.slide, &a.out)?;
            Ok(json!({"command": "mask", "summary": summary}))
        }
        Command::Tile(a) => {
            let cfg = a.tiling.resolve()?;
            let listing = tile_command(&a.slide, &cfg)?;
            let text = serde_json::to_string_pretty(&listing)? + "\n";
            std::fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
            Ok(json!({
                "command": "tile",
                "tissue_tiles": listing.tissue_tiles.len(),
                "annotation_tiles": listing.annotation_tiles.len(),
            }))
        }
        Command::Train(a) => {
            let cfg = a.train.resolve()?;
            let manifest = DatasetManifest::load(&a.manifest)?;
            std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            let echo = serde_json::to_string_pretty(&cfg)? + "\n";
            std::fs::write(a.out.join("config.json"), echo)?;
            let (ck, summary) = train_command(&manifest, &cfg, initial_model(&cfg), &a.out)?;
            ck.save(&a.out.join(CHECKPOINT_FILE))?;
            Ok(json!({"command": "train", "summary": summary}))
        }
        Command::Infer(a) => {
            let manifest = DatasetManifest::load(&a.manifest)?;
            let mode = match a.mode {
                Mode::OneStage => {
                    if a.stage1.is_some() {
                        bail!(Usage("--stage1 is only valid with --mode two-stage".into()));
                    }
                    let Some(ck) = &a.checkpoint else {
                        bail!(Usage("one-stage mode needs --checkpoint".into()));
                    };
                    InferMode::OneStage(load_checkpoint(ck)?)
                }
                Mode::TwoStage => {
                    let (Some(s1), Some(s2)) = (&a.stage1, &a.checkpoint) else {
                        bail!(Usage("two-stage mode needs --stage1 and --checkpoint".into()));
                    };
                    InferMode::TwoStage {
                        stage1: load_checkpoint(s1)?,
                        stage2: load_checkpoint(s2)?,
                    }
                }
            };
            let opts = InferOptions {
                split: a.split,
                aggregation: a.aggregation,
                method: a.method,
                heatmap_dir: a.heatmaps,
            };
            let preds = infer_command(&manifest, &mode, &opts)?;
            preds.save(&a.out)?;
            for f in &preds.failures {
                eprintln!("{}", json!({"warning": f.kind, "slide_id": f.slide_id, "message": f.message}));
            }
            Ok(json!({
                "command": "infer",
                "predictions": preds.predictions.len(),
                "failures": preds.failures.len(),
            }))
        }
        Command::Evaluate(a) => {
            let manifest = DatasetManifest::load(&a.manifest)?;
            let preds = a
                .predictions
                .iter()
                .map(|p| Predictions::load(p))
                .collect::<slidemine::Result<Vec<_>>>()?;
            let cfg = BootstrapConfig {
                iters: a.iters,
                alpha: a.alpha,
                seed: a.seed,
            };
            let report = evaluate_command(&manifest, &preds, &cfg, &a.out)?;
            Ok(json!({"command": "evaluate", "rows": report.rows.len()}))
        }
    }
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({"error": kind, "message": message}));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            // drop the usage block and help hint, keep the rest on one line
            let msg = e.render().to_string();
            let text: Vec<&str> = msg
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty())
                .collect();
            return fail("usage", text.join(" ").trim_start_matches("error: ").to_string(), 1);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let message = format!("{err:#}");
            if err.downcast_ref::<Usage>().is_some() {
                return fail("usage", message, 1);
            }
            match err.downcast_ref::<slidemine::Error>() {
                Some(e) => fail(e.kind(), message, if e.is_user_error() { 1 } else { 2 }),
                None if err.downcast_ref::<serde_json::Error>().is_some() => fail("json", message, 1),
                None if err.downcast_ref::<std::io::Error>().is_some() => fail("io", message, 1),
                None => fail("internal", message, 2),
            }
        }
    }
}
