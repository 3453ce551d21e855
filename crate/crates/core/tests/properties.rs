//! Property tests for the invariants of the kernels, post-processing,
//! metrics and file formats.

mod common;

use proptest::prelude::*;

use common::{naive_conv, oracle_iou};
use y11_core::detect::{decode_head, letterbox, nms, unletterbox, Detection, HeadLayout, LetterboxMeta};
use y11_core::io::{read_ppm, read_weights, write_ppm, write_weights, WeightEntry};
use y11_core::metrics::{average_precision, iou, match_detections, BBox, GroundTruth, PrCurve, ScoredBox};
use y11_core::ops::{
    concat_channels, conv2d, maxpool2d, sigmoid_scalar, silu_scalar, softmax_rows, upsample_nearest2x, ConvSpec,
};
use y11_core::Tensor;

fn tensor(dims: [usize; 4]) -> impl Strategy<Value = Tensor> {
    let len = dims.iter().product::<usize>();
    prop::collection::vec(-4.0f32..4.0, len).prop_map(move |d| Tensor::new(dims, d).unwrap())
}

fn small_tensor() -> impl Strategy<Value = Tensor> {
    (1usize..=2, 1usize..=4, 1usize..=9, 1usize..=9).prop_flat_map(|(n, c, h, w)| tensor([n, c, h, w]))
}

fn bbox() -> impl Strategy<Value = [f64; 4]> {
    (-50.0f64..50.0, -50.0f64..50.0, 0.5f64..40.0, 0.5f64..40.0).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

fn detection() -> impl Strategy<Value = Detection> {
    (0usize..3, 1u32..10, bbox()).prop_map(|(c, s, b)| Detection {
        class_id: c,
        score: s as f32 / 10.0,
        bbox: b.map(|v| v as f32),
    })
}

fn bb(b: [f64; 4]) -> BBox {
    BBox::new(b[0], b[1], b[2], b[3])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_shape_algebra_and_oracle(
        x in small_tensor(),
        cout in 1usize..5,
        k in prop::sample::select(vec![1usize, 3, 5, 7]),
        s in 1usize..4,
        seed in any::<u64>(),
    ) {
        let cin = x.channels();
        let mut spec = ConvSpec::new(cin, cout, k, s, 1).unwrap();
        let wd = spec.weight_dims();
        let mut r = common::rng(seed);
        spec = spec.with_weight(common::random_tensor(&mut r, wd)).unwrap();
        let y = conv2d(&x, &spec).unwrap();
        let p = k / 2;
        let [n, _, h, w] = x.dims();
        prop_assert_eq!(y.dims(), [n, cout, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1]);
        prop_assert!(y.max_abs_diff(&naive_conv(&x, &spec)) < 1e-4);
    }

    #[test]
    fn activations_are_monotone_and_bounded(a in -60.0f32..60.0, b in -60.0f32..60.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(sigmoid_scalar(lo) <= sigmoid_scalar(hi));
        prop_assert!((0.0..=1.0).contains(&sigmoid_scalar(a)));
        prop_assert!((sigmoid_scalar(a) + sigmoid_scalar(-a) - 1.0).abs() < 1e-6);
        prop_assert!(silu_scalar(a) >= -0.2785);
        // silu is increasing to the right of its minimum near -1.278
        if lo >= -1.27 {
            prop_assert!(silu_scalar(lo) <= silu_scalar(hi));
        }
    }

    #[test]
    fn split_concat_round_trip(x in small_tensor(), at in 0usize..5) {
        let at = at.min(x.channels());
        let (a, b) = x.split_channels(at).unwrap();
        let parts: Vec<&Tensor> = [&a, &b].into_iter().filter(|t| t.channels() > 0).collect();
        prop_assert_eq!(concat_channels(&parts).unwrap(), x);
    }

    #[test]
    fn upsample_quadruples_sum(x in small_tensor()) {
        let y = upsample_nearest2x(&x);
        prop_assert!((y.sum() - 4.0 * x.sum()).abs() < 1e-6 * (1.0 + x.sum().abs()));
        prop_assert_eq!(y.dims(), [x.batch(), x.channels(), 2 * x.height(), 2 * x.width()]);
    }

    #[test]
    fn chained_pools_widen_receptive_field(x in small_tensor()) {
        let p = |t: &Tensor, k: usize| maxpool2d(t, k, 1, k / 2).unwrap();
        prop_assert_eq!(p(&p(&x, 5), 5), p(&x, 9));
        prop_assert_eq!(p(&p(&p(&x, 5), 5), 5), p(&x, 13));
        prop_assert_eq!(p(&x, 1), x);
    }

    #[test]
    fn softmax_rows_normalise(row in prop::collection::vec(-50.0f32..50.0, 1..20), shift in -100.0f32..100.0) {
        let mut a = row.clone();
        softmax_rows(&mut a, row.len());
        prop_assert!((a.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        let mut b: Vec<f32> = row.iter().map(|v| v + shift).collect();
        softmax_rows(&mut b, row.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn iou_properties(a in bbox(), b in bbox(), dx in -30.0f64..30.0, dy in -30.0f64..30.0) {
        let v = iou(&bb(a), &bb(b));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&bb(b), &bb(a)));
        prop_assert!((iou(&bb(a), &bb(a)) - 1.0).abs() < 1e-12);
        let t = |q: [f64; 4]| [q[0] + dx, q[1] + dy, q[2] + dx, q[3] + dy];
        prop_assert!((iou(&bb(t(a)), &bb(t(b))) - v).abs() < 1e-9);
        prop_assert!((oracle_iou(a, b) - v).abs() < 1e-12);
    }

    #[test]
    fn nms_invariants(cands in prop::collection::vec(detection(), 0..30), thr in 0.1f32..0.9) {
        let out = nms(&cands, thr);
        for (i, a) in out.iter().enumerate() {
            for b in &out[i + 1..] {
                if a.class_id == b.class_id {
                    prop_assert!(iou(&a.to_bbox(), &b.to_bbox()) <= thr as f64);
                }
            }
        }
        prop_assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
        prop_assert_eq!(nms(&out, thr), out.clone());
        let mut rev = cands.clone();
        rev.reverse();
        prop_assert_eq!(nms(&rev, thr), out);
    }

    #[test]
    fn ap_depends_only_on_ranking(
        gts in prop::collection::vec((0u64..3, bbox()), 1..8),
        dets in prop::collection::vec((0u64..3, bbox(), 0.01f64..1.0), 0..12),
        thr in 0.3f64..0.9,
    ) {
        let g: Vec<GroundTruth> = gts.iter().map(|&(i, b)| GroundTruth { image_id: i, bbox: bb(b) }).collect();
        let d: Vec<ScoredBox> = dets.iter().map(|&(i, b, s)| ScoredBox { image_id: i, bbox: bb(b), score: s }).collect();
        let ap = |d: &[ScoredBox]| average_precision(&PrCurve::from_ledger(&match_detections(d, &g, thr)).unwrap());
        let base = ap(&d);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&base));
        let warped: Vec<ScoredBox> = d.iter().map(|s| ScoredBox { score: s.score.powi(3) * 0.5, ..*s }).collect();
        prop_assert!((ap(&warped) - base).abs() < 1e-12);

        let ledger = match_detections(&d, &g, thr);
        prop_assert_eq!(ledger.tp() + ledger.fn_count(), g.len());

        // a new lowest-ranked false positive never raises AP
        let mut with_fp = d.clone();
        with_fp.push(ScoredBox { image_id: 99, bbox: bb([0.0, 0.0, 1.0, 1.0]), score: 0.0 });
        prop_assert!(ap(&with_fp) <= base + 1e-12);

        // a new lowest-ranked true positive on an unmatched gt never lowers AP
        let matched50 = match_detections(&d, &g, thr);
        if matched50.fn_count() > 0 {
            let lone = GroundTruth { image_id: 42, bbox: bb([0.0, 0.0, 5.0, 5.0]) };
            let mut g2 = g.clone();
            g2.push(lone);
            let ap2 = |d: &[ScoredBox]| average_precision(&PrCurve::from_ledger(&match_detections(d, &g2, thr)).unwrap());
            let before = ap2(&d);
            let mut with_tp = d.clone();
            with_tp.push(ScoredBox { image_id: 42, bbox: lone.bbox, score: 0.0 });
            prop_assert!(ap2(&with_tp) >= before - 1e-12);
        }
    }

    #[test]
    fn tighter_threshold_never_raises_ap(
        gts in prop::collection::vec((0u64..2, bbox()), 1..6),
        dets in prop::collection::vec((0u64..2, bbox(), 0.01f64..1.0), 0..10),
    ) {
        let g: Vec<GroundTruth> = gts.iter().map(|&(i, b)| GroundTruth { image_id: i, bbox: bb(b) }).collect();
        let d: Vec<ScoredBox> = dets.iter().map(|&(i, b, s)| ScoredBox { image_id: i, bbox: bb(b), score: s }).collect();
        let ap = |t: f64| average_precision(&PrCurve::from_ledger(&match_detections(&d, &g, t)).unwrap());
        let coarse = ap(0.5);
        let mean: f64 = y11_core::metrics::coco_thresholds().iter().map(|&t| ap(t)).sum::<f64>() / 10.0;
        prop_assert!(mean <= coarse + 1e-12);
    }

    #[test]
    fn letterbox_point_round_trip(w in 1usize..200, h in 1usize..200, px in 0.0f64..1.0, py in 0.0f64..1.0) {
        let img = Tensor::zeros([1, 3, h, w]);
        let (out, meta) = letterbox(&img, 64).unwrap();
        prop_assert_eq!(out.dims(), [1, 3, 64, 64]);
        let (x, y) = (px * w as f64, py * h as f64);
        let (lx, ly) = meta.forward_point(x, y);
        let det = Detection { class_id: 0, score: 1.0, bbox: [lx as f32, ly as f32, lx as f32, ly as f32] };
        let back = unletterbox(&[det], &meta)[0].bbox;
        prop_assert!((back[0] as f64 - x).abs() <= 0.51 && (back[1] as f64 - y).abs() <= 0.51);
    }

    #[test]
    fn decode_never_exceeds_cells(seed in any::<u64>(), conf in 0.0f32..1.0) {
        let layout = HeadLayout { strides: vec![8, 16], reg_max: 4, num_classes: 3 };
        let mut r = common::rng(seed);
        let raw = vec![
            common::random_tensor(&mut r, [1, 19, 4, 4]).map(|v| v * 6.0),
            common::random_tensor(&mut r, [1, 19, 2, 2]).map(|v| v * 6.0),
        ];
        let dets = decode_head(&raw, &layout, conf).unwrap();
        prop_assert_eq!(dets.len(), 1);
        prop_assert!(dets[0].len() <= 16 + 4);
        prop_assert!(dets[0].iter().all(|d| d.score > conf && d.class_id < 3));
    }

    #[test]
    fn ppm_round_trip(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let img = common::random_tensor(&mut r, [1, 3, h, w]).map(|v| ((v + 1.0) * 127.5).round() / 255.0);
        let bytes = write_ppm(&img).unwrap();
        let back = read_ppm(&bytes).unwrap();
        prop_assert!(back.max_abs_diff(&img) < 1e-6);
        prop_assert_eq!(write_ppm(&back).unwrap(), bytes);
    }

    #[test]
    fn weights_round_trip_bitwise(
        entries in prop::collection::vec((prop::collection::vec(1usize..4, 0..4), any::<u32>()), 0..6),
    ) {
        let list: Vec<WeightEntry> = entries
            .iter()
            .enumerate()
            .map(|(i, (dims, bits))| {
                let n = dims.iter().product::<usize>();
                WeightEntry {
                    name: format!("p{i}.weight"),
                    dims: dims.clone(),
                    data: (0..n).map(|j| f32::from_bits(bits.wrapping_add(j as u32) & 0x7f7f_ffff)).collect(),
                }
            })
            .collect();
        let bytes = write_weights(&list).unwrap();
        let back = read_weights(&bytes).unwrap();
        prop_assert_eq!(back.len(), list.len());
        for (a, b) in back.iter().zip(&list) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.dims, &b.dims);
            prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // every strict prefix is rejected
        if !bytes.is_empty() {
            let cut = bytes.len() / 2;
            prop_assert!(read_weights(&bytes[..cut]).is_err());
        }
    }
}

#[test]
fn identity_meta_leaves_boxes() {
    let meta = LetterboxMeta::identity(100, 80);
    let d = Detection { class_id: 1, score: 0.5, bbox: [10.0, 20.0, 30.0, 40.0] };
    assert_eq!(unletterbox(&[d], &meta), vec![d]);
}
