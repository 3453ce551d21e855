//! Implementations behind the `y11` subcommands. Each returns its artefacts
//! as values; the binary only handles argument parsing, printing and exit
//! codes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{read_annotations, read_detections, read_ppm, read_weights, write_detections, DumpEntry};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{LayerSummary, ModelConfig, ModelGraph, VariantSpec};
use crate::pipeline::{benchmark, synthetic_image, Detector, PhaseTimes, TimingReport};

pub const DEFAULT_SEED: u64 = 0;
pub const EVAL_SCHEMA: &str = "y11.eval/1";
pub const SUMMARY_SCHEMA: &str = "y11.summary/1";

/// Reads a file, naming the path in the error.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_file(path)?).map_err(|_| Error::format(0, format!("{} is not UTF-8", path.display())))
}

/// Builds the model from `config`, loading `weights` if given, otherwise
/// seeding random parameters. Returns the model and whether it is random.
pub fn load_model(config: &ModelConfig, weights: Option<&PathBuf>, seed: u64) -> Result<(ModelGraph, bool)> {
    let mut model = ModelGraph::from_config(config.clone())?;
    match weights {
        Some(path) => {
            let entries = read_weights(&read_file(path)?)?;
            model.load_weights(&entries)?;
            Ok((model, false))
        }
        None => {
            model.randomize(seed);
            Ok((model, true))
        }
    }
}

#[derive(Clone, Debug)]
pub struct InferOptions {
    pub config: ModelConfig,
    pub weights: Option<PathBuf>,
    pub image: PathBuf,
    pub image_id: u64,
    pub input_size: usize,
    pub conf: f32,
    pub iou: f32,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Clone, Debug)]
pub struct InferOutcome {
    pub detections: Vec<DumpEntry>,
    pub times: PhaseTimes,
    pub random_weights: bool,
    pub image_width: usize,
    pub image_height: usize,
}

impl InferOutcome {
    pub fn summary(&self, opts: &InferOptions) -> String {
        let mut s = String::new();
        if self.random_weights {
            let _ = writeln!(s, "note: no weights given; using random parameters (seed {})", opts.seed);
        }
        let _ = writeln!(
            s,
            "image {} ({}x{}) -> {} detections (conf {}, iou {}) written to {}",
            opts.image.display(),
            self.image_width,
            self.image_height,
            self.detections.len(),
            opts.conf,
            opts.iou,
            opts.out.display()
        );
        let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
        let _ = writeln!(
            s,
            "preprocess {:.1} ms | inference {:.1} ms | postprocess {:.1} ms",
            ms(self.times.preprocess),
            ms(self.times.inference),
            ms(self.times.postprocess)
        );
        s
    }
}

/// Runs detection on one PPM image and writes a detection dump.
pub fn infer(opts: &InferOptions) -> Result<InferOutcome> {
    let image = read_ppm(&read_file(&opts.image)?)?;
    let (model, random_weights) = load_model(&opts.config, opts.weights.as_ref(), opts.seed)?;
    let detector = Detector::new(model, opts.input_size, opts.conf, opts.iou)?;
    let (dets, times) = detector.detect(&image)?;
    let detections: Vec<DumpEntry> = dets
        .iter()
        .map(|d| {
            let b = d.bbox.map(|v| v as f64);
            DumpEntry::from_xyxy(opts.image_id, d.class_id as u64, b, d.score as f64)
        })
        .collect();
    fs::write(&opts.out, write_detections(&detections))?;
    Ok(InferOutcome {
        detections,
        times,
        random_weights,
        image_width: image.width(),
        image_height: image.height(),
    })
}

/// Parses an IoU sweep `start:stop:step` (inclusive) or a comma list.
pub fn parse_iou_sweep(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("invalid IoU sweep '{spec}'"));
    let values: Vec<f64> = if spec.contains(':') {
        let parts: Vec<f64> = spec
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [start, stop, step] = parts[..] else { return Err(bad()) };
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        // Round to 1e-6 so 0.5 + 9·0.05 lands exactly on 0.95.
        (0..count)
            .map(|i| ((start + i as f64 * step) * 1e6).round() / 1e6)
            .collect()
    } else {
        spec.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if values.is_empty() || values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(bad());
    }
    Ok(values)
}

/// Evaluates a detection dump against annotations.
pub fn eval(dets_path: &Path, anns_path: &Path, thresholds: &[f64], conf: f64) -> Result<EvalReport> {
    let anns = read_annotations(&read_text(anns_path)?)?;
    let dets = read_detections(&read_text(dets_path)?)?;
    evaluate(&anns, &dets, thresholds, conf)
}

pub fn eval_text(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>8}  {:<16} {:>6} {:>6} {:>8} {:>10}", "class", "name", "gts", "dets", "AP50", "AP50-95");
    for c in &r.classes {
        let mean = c.ap.iter().sum::<f64>() / c.ap.len() as f64;
        let _ = writeln!(
            s,
            "{:>8}  {:<16} {:>6} {:>6} {:>8.4} {:>10.4}",
            c.category_id, c.name, c.num_gt, c.num_dets, c.ap50, mean
        );
    }
    let _ = writeln!(s, "mAP@0.5        {:.4}", r.map50);
    let _ = writeln!(
        s,
        "mAP@[{:.2}:{:.2}] {:.4}",
        r.thresholds.first().copied().unwrap_or(0.0),
        r.thresholds.last().copied().unwrap_or(0.0),
        r.map
    );
    let _ = writeln!(
        s,
        "at conf {:.2}: P {:.4}  R {:.4}  F1 {:.4}  (TP {} FP {} FN {})",
        r.conf_threshold, r.precision, r.recall, r.f1, r.tp, r.fp, r.fn_count
    );
    s
}

pub fn eval_json(r: &EvalReport) -> Result<String> {
    #[derive(Serialize)]
    struct Line<'a> {
        schema: &'static str,
        #[serde(flatten)]
        report: &'a EvalReport,
    }
    Ok(serde_json::to_string(&Line { schema: EVAL_SCHEMA, report: r })?)
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub config: ModelConfig,
    pub input_size: usize,
    pub runs: usize,
    pub warmup: usize,
    pub seed: u64,
}

/// Times the pipeline on a seeded noise image shaped like a 0.7-aspect photo.
pub fn bench(opts: &BenchOptions) -> Result<TimingReport> {
    let mut model = ModelGraph::from_config(opts.config.clone())?;
    model.randomize(opts.seed);
    let detector = Detector::new(model, opts.input_size, 0.25, 0.45)?;
    let height = (opts.input_size * 7 / 10).max(1);
    let image = synthetic_image(opts.input_size, height, opts.seed);
    benchmark(&detector, &image, opts.runs, opts.warmup)
}

pub fn timing_json(r: &TimingReport) -> Result<String> {
    Ok(serde_json::to_string(r)?)
}

/// Per-layer table of a model plus its totals.
#[derive(Clone, Debug)]
pub struct ModelSummary {
    pub variant: String,
    pub input_size: usize,
    pub layers: Vec<LayerSummary>,
    pub params: usize,
    pub gflops: f64,
}

pub fn summary(config: &ModelConfig, input_size: usize) -> Result<ModelSummary> {
    if input_size == 0 || input_size % 32 != 0 {
        return Err(Error::InvalidSpec(format!("input size {input_size} must be a positive multiple of 32")));
    }
    let model = ModelGraph::from_config(config.clone())?;
    let layers = model.summary(input_size)?;
    let gflops = layers.iter().map(|l| l.flops).sum::<u64>() as f64 / 1e9;
    Ok(ModelSummary {
        variant: config.variant.name.clone(),
        input_size,
        params: model.count_params(),
        layers,
        gflops,
    })
}

impl ModelSummary {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:>3}  {:<8}  {:<10}  {:<36}  {:>10}  {:>8}\n",
            "idx", "kind", "from", "output", "params", "GFLOPs"
        );
        for l in &self.layers {
            let _ = writeln!(s, "{l}");
        }
        let _ = writeln!(
            s,
            "variant {} @{}: {} layers, {} params ({:.2}M), {:.2} GFLOPs",
            self.variant,
            self.input_size,
            self.layers.len(),
            self.params,
            self.params as f64 / 1e6,
            self.gflops
        );
        s
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row<'a> {
            index: usize,
            kind: &'a str,
            from: &'a [usize],
            outputs: &'a [[usize; 4]],
            params: usize,
            flops: u64,
        }
        #[derive(Serialize)]
        struct Out<'a> {
            schema: &'static str,
            variant: &'a str,
            input_size: usize,
            params: usize,
            gflops: f64,
            layers: Vec<Row<'a>>,
        }
        let layers = self
            .layers
            .iter()
            .map(|l| Row {
                index: l.index,
                kind: l.kind,
                from: &l.from,
                outputs: &l.outputs,
                params: l.params,
                flops: l.flops,
            })
            .collect();
        Ok(serde_json::to_string(&Out {
            schema: SUMMARY_SCHEMA,
            variant: &self.variant,
            input_size: self.input_size,
            params: self.params,
            gflops: self.gflops,
            layers,
        })?)
    }
}

/// `variant,params,gflops` rows for every standard variant, in n→x order.
pub fn scaling_csv(num_classes: usize, input_size: usize) -> Result<String> {
    let mut s = String::from("variant,params,gflops\n");
    for name in VariantSpec::NAMES {
        let m = summary(&ModelConfig::new(name, num_classes)?, input_size)?;
        let _ = writeln!(s, "{},{},{:.3}", name, m.params, m.gflops);
    }
    Ok(s)
}
