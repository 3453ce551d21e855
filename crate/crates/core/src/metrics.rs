//! Detection metrics: IoU, greedy matching, precision / recall / F1,
//! all-point interpolated AP and mAP over IoU thresholds.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{AnnotationSet, DumpEntry};

/// Axis-aligned box `(x1, y1, x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    /// From COCO `[x, y, w, h]`.
    pub fn from_xywh(b: [f64; 4]) -> Self {
        BBox::new(b[0], b[1], b[0] + b[2], b[1] + b[3])
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// A scored prediction within some image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image_id: u64,
    pub bbox: BBox,
    pub score: f64,
}

/// A ground-truth box within some image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub image_id: u64,
    pub bbox: BBox,
}

/// TP/FP flags of detections (score-descending) for one class at one IoU
/// threshold, plus the ground-truth count.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchLedger {
    pub scores: Vec<f64>,
    pub is_tp: Vec<bool>,
    pub num_gt: usize,
}

impl MatchLedger {
    pub fn tp(&self) -> usize {
        self.is_tp.iter().filter(|&&t| t).count()
    }

    pub fn fp(&self) -> usize {
        self.is_tp.len() - self.tp()
    }

    pub fn fn_count(&self) -> usize {
        self.num_gt - self.tp()
    }
}

/// Greedy matching for a single class. Detections are visited by score
/// (descending, ties in input order); each takes the unmatched ground truth
/// of the same image with highest IoU, and is a TP iff that IoU is at least
/// `iou_threshold`. Each ground truth is matched at most once.
pub fn match_detections(dets: &[ScoredBox], gts: &[GroundTruth], iou_threshold: f64) -> MatchLedger {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut by_image: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id).or_default().push(i);
    }
    let mut matched = vec![false; gts.len()];
    let mut is_tp = Vec::with_capacity(dets.len());
    let mut scores = Vec::with_capacity(dets.len());
    for &di in &order {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for &gi in by_image.get(&d.image_id).map(Vec::as_slice).unwrap_or(&[]) {
            if matched[gi] {
                continue;
            }
            let v = iou(&d.bbox, &gts[gi].bbox);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        let tp = match best {
            Some((gi, v)) if v >= iou_threshold => {
                matched[gi] = true;
                true
            }
            _ => false,
        };
        is_tp.push(tp);
        scores.push(d.score);
    }
    MatchLedger {
        scores,
        is_tp,
        num_gt: gts.len(),
    }
}

/// Precision, recall and F1, with every 0/0 defined as 0.
pub fn precision_recall_f1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Precision / recall after each ranked detection.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

impl PrCurve {
    /// `None` when the class has no ground truth.
    pub fn from_ledger(ledger: &MatchLedger) -> Option<Self> {
        if ledger.num_gt == 0 {
            return None;
        }
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut recall = Vec::with_capacity(ledger.is_tp.len());
        let mut precision = Vec::with_capacity(ledger.is_tp.len());
        for &t in &ledger.is_tp {
            if t {
                tp += 1;
            } else {
                fp += 1;
            }
            recall.push(tp as f64 / ledger.num_gt as f64);
            precision.push(tp as f64 / (tp + fp) as f64);
        }
        Some(PrCurve { recall, precision })
    }
}

/// Area under the precision envelope (precision made non-increasing from
/// the right), integrated exactly over recall from 0.
pub fn average_precision(curve: &PrCurve) -> f64 {
    let mut env = curve.precision.clone();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut prev_r = 0.0;
    let mut ap = 0.0;
    for (r, p) in curve.recall.iter().zip(&env) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// `0.50, 0.55, …, 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Mean over classes at each threshold, then over thresholds.
/// `per_class[k][t]` is the AP of class `k` at threshold `t`.
pub fn mean_ap(per_class: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    let first = per_class
        .first()
        .ok_or_else(|| Error::Eval("no class with ground truth to evaluate".into()))?;
    let nt = first.len();
    if nt == 0 || per_class.iter().any(|c| c.len() != nt) {
        return Err(Error::Eval("inconsistent threshold count".into()));
    }
    let per_t: Vec<f64> = (0..nt)
        .map(|t| per_class.iter().map(|c| c[t]).sum::<f64>() / per_class.len() as f64)
        .collect();
    let overall = per_t.iter().sum::<f64>() / nt as f64;
    Ok((per_t, overall))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub category_id: u64,
    pub name: String,
    pub num_gt: usize,
    pub num_dets: usize,
    /// AP at each threshold of [`EvalReport::thresholds`].
    pub ap: Vec<f64>,
    /// AP at IoU 0.5.
    pub ap50: f64,
    /// Precision–recall curve at IoU 0.5.
    pub curve: PrCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
    /// mAP at each threshold.
    pub map_per_threshold: Vec<f64>,
    pub map50: f64,
    /// mAP averaged over all thresholds.
    pub map: f64,
    pub conf_threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Evaluates `dets` against `gt`. Classes without ground truth are excluded
/// from the means. P/R/F1 are taken at `conf_threshold` with IoU 0.5.
pub fn evaluate(gt: &AnnotationSet, dets: &[DumpEntry], thresholds: &[f64], conf_threshold: f64) -> Result<EvalReport> {
    if thresholds.is_empty() {
        return Err(Error::Eval("empty IoU threshold list".into()));
    }
    let images: HashSet<u64> = gt.images.iter().map(|i| i.id).collect();
    if let Some(d) = dets.iter().find(|d| !images.contains(&d.image_id)) {
        return Err(Error::Eval(format!("detection references unknown image_id {}", d.image_id)));
    }
    let mut gts: BTreeMap<u64, Vec<GroundTruth>> = BTreeMap::new();
    for a in &gt.annotations {
        gts.entry(a.category_id).or_default().push(GroundTruth {
            image_id: a.image_id,
            bbox: BBox::from_xywh(a.bbox),
        });
    }
    let mut preds: HashMap<u64, Vec<ScoredBox>> = HashMap::new();
    for d in dets {
        preds.entry(d.category_id).or_default().push(ScoredBox {
            image_id: d.image_id,
            bbox: BBox::from_xywh(d.bbox),
            score: d.score,
        });
    }
    let names: HashMap<u64, &str> = gt.categories.iter().map(|c| (c.id, c.name.as_str())).collect();

    let mut classes = Vec::new();
    let (mut tp, mut fp, mut total_gt) = (0, 0, 0);
    for (&cat, class_gts) in &gts {
        let class_dets = preds.get(&cat).map(Vec::as_slice).unwrap_or(&[]);
        let ap: Vec<f64> = thresholds
            .iter()
            .map(|&t| {
                let ledger = match_detections(class_dets, class_gts, t);
                PrCurve::from_ledger(&ledger).map_or(0.0, |c| average_precision(&c))
            })
            .collect();
        let ledger50 = match_detections(class_dets, class_gts, 0.5);
        let curve = PrCurve::from_ledger(&ledger50).expect("class has ground truth");
        let kept: Vec<ScoredBox> = class_dets.iter().copied().filter(|d| d.score >= conf_threshold).collect();
        let op = match_detections(&kept, class_gts, 0.5);
        tp += op.tp();
        fp += op.fp();
        total_gt += class_gts.len();
        classes.push(ClassReport {
            category_id: cat,
            name: names.get(&cat).unwrap_or(&"").to_string(),
            num_gt: class_gts.len(),
            num_dets: class_dets.len(),
            ap,
            ap50: average_precision(&curve),
            curve,
        });
    }
    // Confident detections of classes with no ground truth are false positives.
    fp += preds
        .iter()
        .filter(|(cat, _)| !gts.contains_key(cat))
        .flat_map(|(_, v)| v)
        .filter(|d| d.score >= conf_threshold)
        .count();
    let table: Vec<Vec<f64>> = classes.iter().map(|c| c.ap.clone()).collect();
    let (map_per_threshold, map) = mean_ap(&table)?;
    let map50 = classes.iter().map(|c| c.ap50).sum::<f64>() / classes.len() as f64;
    let fn_count = total_gt - tp;
    let (precision, recall, f1) = precision_recall_f1(tp, fp, fn_count);
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        classes,
        map_per_threshold,
        map50,
        map,
        conf_threshold,
        tp,
        fp,
        fn_count,
        precision,
        recall,
        f1,
    })
}
