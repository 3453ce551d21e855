//! End-to-end detection pipeline and the three-phase latency harness.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::detect::{decode_head, letterbox, nms, unletterbox, Detection, HeadLayout};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::Tensor;

/// Wall-clock spent in each phase of one pipeline run.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimes {
    /// Letterbox.
    pub preprocess: Duration,
    /// Graph forward.
    pub inference: Duration,
    /// Decode, NMS and un-letterbox.
    pub postprocess: Duration,
}

/// Model plus thresholds and network input size.
#[derive(Clone, Debug)]
pub struct Detector {
    pub model: ModelGraph,
    pub input_size: usize,
    pub conf_threshold: f32,
    pub iou_threshold: f32,
}

impl Detector {
    pub fn new(model: ModelGraph, input_size: usize, conf_threshold: f32, iou_threshold: f32) -> Result<Self> {
        if input_size == 0 || input_size % 32 != 0 {
            return Err(Error::InvalidSpec(format!(
                "input size {input_size} must be a positive multiple of 32"
            )));
        }
        Ok(Detector {
            model,
            input_size,
            conf_threshold,
            iou_threshold,
        })
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout {
            strides: self.model.strides().to_vec(),
            reg_max: self.model.reg_max(),
            num_classes: self.model.num_classes(),
        }
    }

    /// Detects objects in a `1×3×h×w` image; boxes are in original pixels.
    pub fn detect(&self, image: &Tensor) -> Result<(Vec<Detection>, PhaseTimes)> {
        let t0 = Instant::now();
        let (input, meta) = letterbox(image, self.input_size)?;
        let t1 = Instant::now();
        let raw = self.model.forward(&input)?;
        let t2 = Instant::now();
        let candidates = decode_head(&raw, &self.layout(), self.conf_threshold)?
            .pop()
            .unwrap_or_default();
        let kept = nms(&candidates, self.iou_threshold);
        let dets: Vec<Detection> = unletterbox(&kept, &meta)
            .into_iter()
            .filter(|d| d.bbox[0] < d.bbox[2] && d.bbox[1] < d.bbox[3])
            .collect();
        let t3 = Instant::now();
        Ok((
            dets,
            PhaseTimes {
                preprocess: t1 - t0,
                inference: t2 - t1,
                postprocess: t3 - t2,
            },
        ))
    }
}

/// Summary statistics of one phase, in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PhaseStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl PhaseStats {
    /// Population statistics over `samples_ms`, which must be non-empty.
    pub fn from_samples(samples_ms: &[f64]) -> Self {
        let n = samples_ms.len() as f64;
        let mean = samples_ms.iter().sum::<f64>() / n;
        let var = samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        PhaseStats {
            mean,
            std: var.sqrt(),
            min: samples_ms.iter().copied().fold(f64::INFINITY, f64::min),
            max: samples_ms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

pub const TIMING_SCHEMA: &str = "y11.timing/1";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingReport {
    pub schema: &'static str,
    pub variant: String,
    pub device: &'static str,
    pub input_size: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub runs: usize,
    pub warmup: usize,
    pub preprocess: PhaseStats,
    pub inference: PhaseStats,
    pub postprocess: PhaseStats,
}

impl TimingReport {
    pub fn to_text(&self) -> String {
        let row = |name: &str, s: &PhaseStats| {
            format!(
                "{name:<12} {:>10.2} {:>10.2} {:>10.2} {:>10.2}\n",
                s.mean, s.std, s.min, s.max
            )
        };
        let mut out = format!(
            "variant {} | device {} | image {}x{} -> {}x{} | runs {} (warmup {})\n",
            self.variant,
            self.device,
            self.image_width,
            self.image_height,
            self.input_size,
            self.input_size,
            self.runs,
            self.warmup
        );
        out.push_str(&format!(
            "{:<12} {:>10} {:>10} {:>10} {:>10}\n",
            "phase (ms)", "mean", "std", "min", "max"
        ));
        out.push_str(&row("preprocess", &self.preprocess));
        out.push_str(&row("inference", &self.inference));
        out.push_str(&row("postprocess", &self.postprocess));
        out
    }
}

/// Deterministic noise image of `height × width`.
pub fn synthetic_image(width: usize, height: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([1, 3, height, width], |_, _, _, _| rng.gen::<f32>())
}

/// Runs `warmup` untimed and `runs` timed pipeline passes on `image`.
pub fn benchmark(detector: &Detector, image: &Tensor, runs: usize, warmup: usize) -> Result<TimingReport> {
    if runs == 0 {
        return Err(Error::InvalidSpec("runs must be at least 1".into()));
    }
    for _ in 0..warmup {
        detector.detect(image)?;
    }
    let ms = |d: Duration| d.as_secs_f64() * 1e3;
    let (mut pre, mut inf, mut post) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..runs {
        let (_, t) = detector.detect(image)?;
        pre.push(ms(t.preprocess));
        inf.push(ms(t.inference));
        post.push(ms(t.postprocess));
    }
    Ok(TimingReport {
        schema: TIMING_SCHEMA,
        variant: detector.model.config.variant.name.clone(),
        device: "CPU",
        input_size: detector.input_size,
        image_width: image.width(),
        image_height: image.height(),
        runs,
        warmup,
        preprocess: PhaseStats::from_samples(&pre),
        inference: PhaseStats::from_samples(&inf),
        postprocess: PhaseStats::from_samples(&post),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats() {
        let s = PhaseStats::from_samples(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!((s.min, s.max), (1.0, 3.0));
        assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn synthetic_is_seeded() {
        assert_eq!(synthetic_image(8, 4, 1), synthetic_image(8, 4, 1));
        assert_ne!(synthetic_image(8, 4, 1), synthetic_image(8, 4, 2));
    }

    #[test]
    fn rejects_bad_size() {
        let g = ModelGraph::build("n", 1).unwrap();
        assert!(Detector::new(g, 100, 0.25, 0.45).is_err());
    }
}
