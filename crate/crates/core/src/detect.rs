//! Letterbox preprocessing, head decoding, class-aware NMS and mapping boxes
//! back to original image coordinates.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::metrics::{iou, BBox};
use crate::ops::{sigmoid_scalar, softmax_rows};
use crate::tensor::Tensor;

pub const DEFAULT_CONF_THRESHOLD: f32 = 0.25;
pub const DEFAULT_IOU_THRESHOLD: f32 = 0.45;
/// Letterbox padding value (114 of 255).
pub const PAD_VALUE: f32 = 114.0 / 255.0;

/// Inverse mapping from letterboxed pixels to original pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LetterboxMeta {
    pub scale: f64,
    pub pad_left: usize,
    pub pad_top: usize,
    pub orig_width: usize,
    pub orig_height: usize,
}

impl LetterboxMeta {
    pub fn identity(width: usize, height: usize) -> Self {
        LetterboxMeta {
            scale: 1.0,
            pad_left: 0,
            pad_top: 0,
            orig_width: width,
            orig_height: height,
        }
    }

    /// Original → letterboxed coordinates.
    pub fn forward_point(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale + self.pad_left as f64, y * self.scale + self.pad_top as f64)
    }

    /// Letterboxed → original coordinates (unclipped).
    pub fn inverse_point(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.pad_left as f64) / self.scale, (y - self.pad_top as f64) / self.scale)
    }
}

/// Aspect-preserving nearest-neighbour resize into a `target × target`
/// canvas, centred, padded with [`PAD_VALUE`].
pub fn letterbox(image: &Tensor, target: usize) -> Result<(Tensor, LetterboxMeta)> {
    let [n, c, h, w] = image.dims();
    if n != 1 || h == 0 || w == 0 || target == 0 {
        return Err(Error::Shape(format!(
            "letterbox needs a non-empty 1×C×h×w image, got {:?}",
            image.dims()
        )));
    }
    let scale = (target as f64 / w as f64).min(target as f64 / h as f64);
    let new_w = ((w as f64 * scale).round() as usize).clamp(1, target);
    let new_h = ((h as f64 * scale).round() as usize).clamp(1, target);
    let pad_left = (target - new_w) / 2;
    let pad_top = (target - new_h) / 2;
    let src_x: Vec<usize> = (0..new_w)
        .map(|x| (((x as f64 + 0.5) * w as f64 / new_w as f64) as usize).min(w - 1))
        .collect();
    let mut out = Tensor::full([1, c, target, target], PAD_VALUE);
    let data = out.data_mut();
    for ch in 0..c {
        let plane = image.plane(0, ch);
        for y in 0..new_h {
            let sy = (((y as f64 + 0.5) * h as f64 / new_h as f64) as usize).min(h - 1);
            let src_row = &plane[sy * w..(sy + 1) * w];
            let dst = &mut data[(ch * target + pad_top + y) * target + pad_left..][..new_w];
            for (d, &sx) in dst.iter_mut().zip(&src_x) {
                *d = src_row[sx];
            }
        }
    }
    Ok((
        out,
        LetterboxMeta {
            scale,
            pad_left,
            pad_top,
            orig_width: w,
            orig_height: h,
        },
    ))
}

/// A scored, classed, axis-aligned box `(x1, y1, x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f32,
    pub bbox: [f32; 4],
}

impl Detection {
    pub fn to_bbox(&self) -> BBox {
        BBox::new(
            self.bbox[0] as f64,
            self.bbox[1] as f64,
            self.bbox[2] as f64,
            self.bbox[3] as f64,
        )
    }
}

/// Layout of the raw head maps.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadLayout {
    pub strides: Vec<usize>,
    pub reg_max: usize,
    pub num_classes: usize,
}

/// Decodes raw head maps into candidate boxes in letterboxed pixels.
///
/// Each map has `4·reg_max` distance-distribution channels (left, top,
/// right, bottom; `reg_max` bins each) followed by `num_classes` logits.
/// A cell yields one candidate for its best class when that class's
/// sigmoid score exceeds `conf_threshold`. Returns one list per batch item.
pub fn decode_head(raw: &[Tensor], layout: &HeadLayout, conf_threshold: f32) -> Result<Vec<Vec<Detection>>> {
    if raw.len() != layout.strides.len() {
        return Err(Error::Shape(format!(
            "{} head maps for {} strides",
            raw.len(),
            layout.strides.len()
        )));
    }
    let rm = layout.reg_max;
    let expected = 4 * rm + layout.num_classes;
    let batch = raw.first().map_or(0, |t| t.batch());
    let mut out = vec![Vec::new(); batch];
    let mut bins = vec![0.0f32; 4 * rm];
    for (map, &stride) in raw.iter().zip(&layout.strides) {
        let [n, c, h, w] = map.dims();
        if c != expected {
            return Err(Error::ChannelMismatch { expected, got: c });
        }
        if n != batch {
            return Err(Error::Shape("head maps disagree on batch size".into()));
        }
        let hw = h * w;
        for (bi, dets) in out.iter_mut().enumerate() {
            let base = bi * c * hw;
            let chan = |ch: usize, cell: usize| map.data()[base + ch * hw + cell];
            for cell in 0..hw {
                let (mut best, mut best_logit) = (0, f32::NEG_INFINITY);
                for k in 0..layout.num_classes {
                    let v = chan(4 * rm + k, cell);
                    if v > best_logit {
                        best_logit = v;
                        best = k;
                    }
                }
                let score = sigmoid_scalar(best_logit);
                if !(score > conf_threshold) {
                    continue;
                }
                for (i, b) in bins.iter_mut().enumerate() {
                    *b = chan(i, cell);
                }
                let d = expected_bins(&mut bins, rm);
                let s = stride as f32;
                let cx = (cell % w) as f32 + 0.5;
                let cy = (cell / w) as f32 + 0.5;
                dets.push(Detection {
                    class_id: best,
                    score,
                    bbox: [(cx - d[0]) * s, (cy - d[1]) * s, (cx + d[2]) * s, (cy + d[3]) * s],
                });
            }
        }
    }
    Ok(out)
}

/// Softmax-expected bin index for each of the four sides.
pub fn expected_bins(logits: &mut [f32], reg_max: usize) -> [f32; 4] {
    softmax_rows(logits, reg_max);
    let mut d = [0.0f32; 4];
    for (side, row) in logits.chunks(reg_max).enumerate() {
        d[side] = row.iter().enumerate().map(|(i, p)| i as f32 * p).sum();
    }
    d
}

/// Total order used by NMS: score descending, then class id, then box
/// coordinates ascending.
fn nms_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox[0].total_cmp(&b.bbox[0]))
        .then(a.bbox[1].total_cmp(&b.bbox[1]))
        .then(a.bbox[2].total_cmp(&b.bbox[2]))
        .then(a.bbox[3].total_cmp(&b.bbox[3]))
}

/// Greedy class-aware non-maximum suppression. A box is kept iff its IoU
/// with every already-kept box of the same class is at most `iou_threshold`.
/// Output is sorted by score descending.
pub fn nms(candidates: &[Detection], iou_threshold: f32) -> Vec<Detection> {
    let mut order: Vec<Detection> = candidates.to_vec();
    order.sort_by(nms_order);
    let mut kept: Vec<(Detection, BBox)> = Vec::new();
    for det in order {
        let bx = det.to_bbox();
        let suppressed = kept
            .iter()
            .any(|(k, kb)| k.class_id == det.class_id && iou(kb, &bx) > iou_threshold as f64);
        if !suppressed {
            kept.push((det, bx));
        }
    }
    kept.into_iter().map(|(d, _)| d).collect()
}

/// Maps letterboxed boxes back to the original image, clipping to its bounds.
pub fn unletterbox(dets: &[Detection], meta: &LetterboxMeta) -> Vec<Detection> {
    let (w, h) = (meta.orig_width as f64, meta.orig_height as f64);
    dets.iter()
        .map(|d| {
            let (x1, y1) = meta.inverse_point(d.bbox[0] as f64, d.bbox[1] as f64);
            let (x2, y2) = meta.inverse_point(d.bbox[2] as f64, d.bbox[3] as f64);
            Detection {
                bbox: [
                    x1.clamp(0.0, w) as f32,
                    y1.clamp(0.0, h) as f32,
                    x2.clamp(0.0, w) as f32,
                    y2.clamp(0.0, h) as f32,
                ],
                ..*d
            }
        })
        .collect()
}
