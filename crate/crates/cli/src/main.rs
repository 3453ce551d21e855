//! `y11`: run, evaluate, time and inspect YOLO11-family detectors on CPU.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use y11_core::commands::{self, BenchOptions, InferOptions, DEFAULT_SEED};
use y11_core::detect::{DEFAULT_CONF_THRESHOLD, DEFAULT_IOU_THRESHOLD};
use y11_core::io::write_weights;
use y11_core::model::{DEFAULT_INPUT_SIZE, DEFAULT_NUM_CLASSES};
use y11_core::{Error, ModelConfig, ModelGraph};

const INFER_SCHEMA: &str = "y11.infer/1";

#[derive(Parser)]
#[command(name = "y11", version, about = "CPU inference engine for YOLO11-family detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect objects in a PPM image and write a detection dump.
    Infer(InferArgs),
    /// Score a detection dump against COCO-style annotations.
    Eval(EvalArgs),
    /// Time preprocess / inference / postprocess on a seeded noise image.
    Bench(BenchArgs),
    /// Print the per-layer table with parameter and FLOP totals.
    Summary(SummaryArgs),
    /// Write a seeded random weights file for a model.
    InitWeights(InitArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct ModelArgs {
    /// Scaling variant.
    #[arg(long, value_parser = ["n", "s", "m", "l", "x"], conflicts_with = "config")]
    variant: Option<String>,
    /// Model config file (`key = value` lines); replaces --variant and --nc.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of classes.
    #[arg(long, default_value_t = DEFAULT_NUM_CLASSES, conflicts_with = "config")]
    nc: usize,
}

impl ModelArgs {
    fn resolve(&self) -> Result<ModelConfig, Error> {
        match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                ModelConfig::parse(&text)
            }
            None => ModelConfig::new(self.variant.as_deref().unwrap_or("n"), self.nc),
        }
    }
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Input image (binary PPM).
    #[arg(long)]
    image: PathBuf,
    /// Weights file; random parameters from --seed when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Network input size (multiple of 32).
    #[arg(long, default_value_t = DEFAULT_INPUT_SIZE)]
    size: usize,
    #[arg(long, default_value_t = DEFAULT_CONF_THRESHOLD)]
    conf: f32,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    iou: f32,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// image_id written into the dump.
    #[arg(long, default_value_t = 1)]
    image_id: u64,
    /// Detection dump path.
    #[arg(long, default_value = "detections.json")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct EvalArgs {
    /// Detection dump.
    #[arg(long)]
    dets: PathBuf,
    /// Annotation file.
    #[arg(long)]
    anns: PathBuf,
    /// IoU thresholds: `start:stop:step` or a comma list.
    #[arg(long, default_value = "0.5:0.95:0.05")]
    iou_sweep: String,
    /// Confidence for the P/R/F1 operating point.
    #[arg(long, default_value_t = DEFAULT_CONF_THRESHOLD as f64)]
    conf: f64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = DEFAULT_INPUT_SIZE)]
    size: usize,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct SummaryArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = DEFAULT_INPUT_SIZE)]
    size: usize,
    /// Also write the variant-vs-params/GFLOPs series as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn emit_line(text: &str) {
    emit(&format!("{text}\n"));
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Infer(a) => {
            let opts = InferOptions {
                config: a.model.resolve()?,
                weights: a.weights,
                image: a.image,
                image_id: a.image_id,
                input_size: a.size,
                conf: a.conf,
                iou: a.iou,
                seed: a.seed,
                out: a.out,
            };
            let outcome = commands::infer(&opts)?;
            match a.format {
                Format::Text => emit(&outcome.summary(&opts)),
                Format::Json => {
                    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
                    let line = json!({
                        "schema": INFER_SCHEMA,
                        "image": opts.image,
                        "image_width": outcome.image_width,
                        "image_height": outcome.image_height,
                        "variant": opts.config.variant.name,
                        "random_weights": outcome.random_weights,
                        "seed": opts.seed,
                        "detections": outcome.detections.len(),
                        "out": opts.out,
                        "preprocess_ms": ms(outcome.times.preprocess),
                        "inference_ms": ms(outcome.times.inference),
                        "postprocess_ms": ms(outcome.times.postprocess),
                    });
                    emit_line(&line.to_string());
                }
            }
        }
        Command::Eval(a) => {
            let thresholds = commands::parse_iou_sweep(&a.iou_sweep)?;
            let report = commands::eval(&a.dets, &a.anns, &thresholds, a.conf)?;
            match a.format {
                Format::Text => emit(&commands::eval_text(&report)),
                Format::Json => emit_line(&commands::eval_json(&report)?),
            }
        }
        Command::Bench(a) => {
            let report = commands::bench(&BenchOptions {
                config: a.model.resolve()?,
                input_size: a.size,
                runs: a.runs,
                warmup: a.warmup,
                seed: a.seed,
            })?;
            match a.format {
                Format::Text => emit(&report.to_text()),
                Format::Json => emit_line(&commands::timing_json(&report)?),
            }
        }
        Command::Summary(a) => {
            let config = a.model.resolve()?;
            let s = commands::summary(&config, a.size)?;
            match a.format {
                Format::Text => emit(&s.to_text()),
                Format::Json => emit_line(&s.to_json()?),
            }
            if let Some(path) = a.csv {
                fs::write(path, commands::scaling_csv(config.num_classes, a.size)?)?;
            }
        }
        Command::InitWeights(a) => {
            let g = ModelGraph::from_config(a.model.resolve()?)?.init_random(a.seed);
            fs::write(&a.out, write_weights(&g.export_weights())?)?;
            emit_line(&format!("wrote {} parameters to {}", g.count_params(), a.out.display()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    y11_core::init_threads_from_env();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}
