//! Independent reference implementations and fixtures shared by the
//! integration tests. Nothing here calls the library's kernels.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use y11_core::blocks::{ConvBlock, Module, ParamRole};
use y11_core::io::{Annotation, AnnotationSet, Category, DumpEntry, ImageInfo};
use y11_core::ops::{Activation, BatchNormParams, ConvSpec};
use y11_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor {
    Tensor::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0f32..1.0))
}

/// Fills every parameter of `m`: weights and biases uniform in ±0.5,
/// gamma in [0.5, 1.5], beta and mean in ±0.2, var in [0.5, 1.5].
pub fn randomize<M: Module + ?Sized>(m: &mut M, seed: u64) {
    let mut r = rng(seed);
    m.visit_params_mut("", &mut |_, role, _, data| {
        for v in data.iter_mut() {
            *v = match role {
                ParamRole::Weight | ParamRole::Bias => r.gen_range(-0.5..0.5),
                ParamRole::Gamma | ParamRole::Var => r.gen_range(0.5..1.5),
                ParamRole::Beta | ParamRole::Mean => r.gen_range(-0.2..0.2),
            };
        }
    });
}

/// Zeroes the learnable parameters (weights, biases, gamma, beta) of `m`.
pub fn zero_learnable<M: Module + ?Sized>(m: &mut M) {
    m.visit_params_mut("", &mut |_, role, _, data| {
        if role.is_learnable() {
            data.iter_mut().for_each(|v| *v = 0.0);
        }
    });
}

/// Direct convolution with zero padding k/2, seven nested loops.
pub fn naive_conv(x: &Tensor, spec: &ConvSpec) -> Tensor {
    let [n, cin, h, w] = x.dims();
    let (k, s, g) = (spec.kernel, spec.stride, spec.groups);
    let p = k / 2;
    let ho = (h + 2 * p - k) / s + 1;
    let wo = (w + 2 * p - k) / s + 1;
    let cout = spec.out_channels;
    let (cin_g, cout_g) = (cin / g, cout / g);
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    for b in 0..n {
        for oc in 0..cout {
            let grp = oc / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f64;
                    for ic in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.get(b, grp * cin_g + ic, iy as usize, ix as usize);
                                let wv = spec.weight.get(oc, ic, ky, kx);
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    if let Some(bias) = &spec.bias {
                        acc += bias[oc] as f64;
                    }
                    out.set(b, oc, oy, ox, acc as f32);
                }
            }
        }
    }
    out
}

pub fn naive_bn(x: &Tensor, bn: &BatchNormParams) -> Tensor {
    Tensor::from_fn(x.dims(), |b, c, y, xx| {
        let v = x.get(b, c, y, xx) as f64;
        let norm = (v - bn.running_mean[c] as f64) / (bn.running_var[c] as f64 + bn.epsilon as f64).sqrt();
        (norm * bn.gamma[c] as f64 + bn.beta[c] as f64) as f32
    })
}

pub fn naive_silu(v: f32) -> f32 {
    let v = v as f64;
    (v / (1.0 + (-v).exp())) as f32
}

/// conv → bn → activation, unfused.
pub fn naive_block(x: &Tensor, b: &ConvBlock) -> Tensor {
    let mut y = naive_conv(x, &b.conv);
    if let Some(bn) = &b.bn {
        y = naive_bn(&y, bn);
    }
    match b.activation {
        Activation::Silu => y.map(naive_silu),
        Activation::None => y,
    }
}

/// Max pool with stride 1 and padding k/2, cells outside the image ignored.
pub fn naive_pool(x: &Tensor, k: usize) -> Tensor {
    let [_, _, h, w] = x.dims();
    let p = (k / 2) as isize;
    Tensor::from_fn(x.dims(), |b, c, y, xx| {
        let mut m = f32::NEG_INFINITY;
        for dy in -p..=p {
            for dx in -p..=p {
                let (iy, ix) = (y as isize + dy, xx as isize + dx);
                if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                    m = m.max(x.get(b, c, iy as usize, ix as usize));
                }
            }
        }
        m
    })
}

pub fn cat(parts: &[&Tensor]) -> Tensor {
    let [n, _, h, w] = parts[0].dims();
    let c: usize = parts.iter().map(|t| t.channels()).sum();
    Tensor::from_fn([n, c, h, w], |b, ch, y, x| {
        let mut ch = ch;
        for t in parts {
            if ch < t.channels() {
                return t.get(b, ch, y, x);
            }
            ch -= t.channels();
        }
        unreachable!()
    })
}

pub fn slice_channels(t: &Tensor, start: usize, len: usize) -> Tensor {
    let [n, _, h, w] = t.dims();
    Tensor::from_fn([n, len, h, w], |b, c, y, x| t.get(b, start + c, y, x))
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.dims(), |n, c, y, x| a.get(n, c, y, x) + b.get(n, c, y, x))
}

/// Multi-head attention written out per element. Channel layout of the
/// qkv projection is `[q(kd), k(kd), v(hd)]` per head.
pub fn naive_attention(
    x: &Tensor,
    qkv: &ConvBlock,
    pe: &ConvBlock,
    proj: &ConvBlock,
    heads: usize,
    kd: usize,
    hd: usize,
) -> Tensor {
    let [b, c, h, w] = x.dims();
    let n = h * w;
    let t = naive_block(x, qkv);
    let at = |bi: usize, ch: usize, i: usize| t.get(bi, ch, i / w, i % w) as f64;
    let scale = 1.0 / (kd as f64).sqrt();
    let mut v = Tensor::zeros([b, c, h, w]);
    let mut mixed = Tensor::zeros([b, c, h, w]);
    for bi in 0..b {
        for head in 0..heads {
            let base = head * (2 * kd + hd);
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| (0..kd).map(|d| at(bi, base + d, i) * at(bi, base + kd + d, j)).sum::<f64>() * scale)
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for ch in 0..hd {
                    let val: f64 = (0..n).map(|j| at(bi, base + 2 * kd + ch, j) * e[j] / z).sum();
                    mixed.set(bi, head * hd + ch, i / w, i % w, val as f32);
                    v.set(bi, head * hd + ch, i / w, i % w, at(bi, base + 2 * kd + ch, i) as f32);
                }
            }
        }
    }
    let mixed = add(&mixed, &naive_block(&v, pe));
    naive_block(&mixed, proj)
}

/// One ground-truth or detection box in xyxy with image and class.
#[derive(Clone, Copy, Debug)]
pub struct Rec {
    pub image: u64,
    pub class: u64,
    pub b: [f64; 4],
    pub score: f64,
}

fn r(image: u64, class: u64, b: [f64; 4], score: f64) -> Rec {
    Rec { image, class, b, score }
}

/// Five images, two classes. Scores are distinct; overlaps are spread across
/// the 0.5–0.95 threshold range; includes misses, duplicates and a stray.
pub fn map_fixture() -> (Vec<Rec>, Vec<Rec>) {
    let gts = vec![
        r(1, 1, [10.0, 10.0, 50.0, 50.0], 1.0),
        r(1, 2, [60.0, 60.0, 100.0, 120.0], 1.0),
        r(2, 1, [0.0, 0.0, 30.0, 30.0], 1.0),
        r(2, 1, [40.0, 0.0, 70.0, 30.0], 1.0),
        r(3, 2, [20.0, 20.0, 80.0, 80.0], 1.0),
        r(3, 2, [100.0, 100.0, 140.0, 150.0], 1.0),
        r(4, 1, [5.0, 5.0, 45.0, 45.0], 1.0),
        r(5, 2, [0.0, 50.0, 40.0, 90.0], 1.0),
        r(5, 1, [70.0, 70.0, 110.0, 100.0], 1.0),
    ];
    let dets = vec![
        r(1, 1, [11.0, 10.0, 50.0, 51.0], 0.95),
        r(1, 1, [12.0, 12.0, 52.0, 52.0], 0.62),
        r(1, 2, [60.0, 64.0, 100.0, 118.0], 0.88),
        r(2, 1, [2.0, 1.0, 31.0, 33.0], 0.81),
        r(2, 1, [45.0, 3.0, 75.0, 36.0], 0.57),
        r(2, 2, [0.0, 0.0, 30.0, 30.0], 0.44),
        r(3, 2, [22.0, 18.0, 84.0, 78.0], 0.91),
        r(3, 2, [100.0, 110.0, 140.0, 160.0], 0.49),
        r(3, 1, [200.0, 200.0, 230.0, 230.0], 0.73),
        r(4, 1, [5.0, 5.0, 45.0, 45.0], 0.99),
        r(4, 1, [25.0, 25.0, 65.0, 65.0], 0.35),
        r(5, 2, [4.0, 54.0, 40.0, 90.0], 0.66),
        r(5, 1, [75.0, 70.0, 110.0, 104.0], 0.52),
        r(5, 1, [0.0, 50.0, 40.0, 90.0], 0.31),
    ];
    (gts, dets)
}

pub fn fixture_files(gts: &[Rec], dets: &[Rec]) -> (AnnotationSet, Vec<DumpEntry>) {
    let set = AnnotationSet {
        images: (1..=5)
            .map(|id| ImageInfo {
                id,
                width: 320,
                height: 320,
                file_name: None,
            })
            .collect(),
        annotations: gts
            .iter()
            .enumerate()
            .map(|(i, g)| Annotation {
                id: i as u64 + 1,
                image_id: g.image,
                category_id: g.class,
                bbox: [g.b[0], g.b[1], g.b[2] - g.b[0], g.b[3] - g.b[1]],
            })
            .collect(),
        categories: vec![
            Category { id: 1, name: "a".into() },
            Category { id: 2, name: "b".into() },
        ],
    };
    let dumps = dets
        .iter()
        .map(|d| DumpEntry {
            image_id: d.image,
            category_id: d.class,
            bbox: [d.b[0], d.b[1], d.b[2] - d.b[0], d.b[3] - d.b[1]],
            score: d.score,
        })
        .collect();
    (set, dumps)
}

pub fn oracle_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// AP of one class at one threshold: greedy matching by score, then
/// Σ over true positives of the best precision at any rank at or below it,
/// divided by the ground-truth count.
pub fn oracle_ap(gts: &[Rec], dets: &[Rec], class: u64, thr: f64) -> Option<f64> {
    let g: Vec<&Rec> = gts.iter().filter(|x| x.class == class).collect();
    if g.is_empty() {
        return None;
    }
    let mut d: Vec<&Rec> = dets.iter().filter(|x| x.class == class).collect();
    d.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut used = vec![false; g.len()];
    let mut hits = Vec::new();
    for det in &d {
        let mut best: Option<(usize, f64)> = None;
        for (i, gt) in g.iter().enumerate() {
            if used[i] || gt.image != det.image {
                continue;
            }
            let v = oracle_iou(det.b, gt.b);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
        let hit = matches!(best, Some((_, v)) if v >= thr);
        if hit {
            used[best.unwrap().0] = true;
        }
        hits.push(hit);
    }
    let precision: Vec<f64> = (0..hits.len())
        .map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            let best = precision[k..].iter().cloned().fold(0.0, f64::max);
            ap += best / g.len() as f64;
        }
    }
    Some(ap)
}

/// mAP over the given thresholds and over classes with ground truth,
/// enumerating every (threshold, class) pair.
pub fn oracle_map(gts: &[Rec], dets: &[Rec], thresholds: &[f64]) -> f64 {
    let mut classes: Vec<u64> = gts.iter().map(|g| g.class).collect();
    classes.sort();
    classes.dedup();
    let mut total = 0.0;
    for &t in thresholds {
        let per_class: f64 = classes.iter().map(|&c| oracle_ap(gts, dets, c, t).unwrap()).sum();
        total += per_class / classes.len() as f64;
    }
    total / thresholds.len() as f64
}
