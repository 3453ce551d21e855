mod common;

use common::*;
use y11_core::blocks::{
    Attention, Bottleneck, C2f, C2psa, C3k, C3k2, ConvBlock, CspUnit, Module, PsaBlock, Sppf,
};
use y11_core::ops::Activation;
use y11_core::Tensor;

#[test]
fn conv_block_matches_unfused_composition() {
    let mut r = rng(10);
    for seed in 0..10 {
        let mut b = ConvBlock::silu(5, 7, 3, 1 + seed as usize % 2).unwrap();
        randomize(&mut b, seed);
        let x = random_tensor(&mut r, [2, 5, 9, 8]);
        let got = b.forward(&x).unwrap();
        assert!(got.max_abs_diff(&naive_block(&x, &b)) < 1e-4);
        assert!(b.folded().unwrap().forward(&x).unwrap().max_abs_diff(&got) < 1e-4);
    }
}

#[test]
fn conv_block_zero_weights_give_zero() {
    let mut b = ConvBlock::silu(3, 4, 3, 1).unwrap();
    zero_learnable(&mut b);
    let x = random_tensor(&mut rng(0), [1, 3, 5, 5]);
    assert!(b.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn bottleneck_identity_convs_without_shortcut() {
    let mut b = Bottleneck::new(4, 4, false, (1, 1), 1.0).unwrap();
    for cv in [&mut b.cv1, &mut b.cv2] {
        cv.activation = Activation::None;
        cv.bn = None;
        cv.conv.weight = Tensor::from_fn([4, 4, 1, 1], |o, i, _, _| if o == i { 1.0 } else { 0.0 });
    }
    let x = random_tensor(&mut rng(1), [1, 4, 3, 3]);
    assert_eq!(b.forward(&x).unwrap(), x);
}

#[test]
fn bottleneck_shortcut_adds_input() {
    let mut with = Bottleneck::new(8, 8, true, (3, 3), 0.5).unwrap();
    randomize(&mut with, 2);
    let without = Bottleneck { shortcut: false, ..with.clone() };
    let x = random_tensor(&mut rng(2), [1, 8, 6, 6]);
    let diff = Tensor::from_fn(x.dims(), {
        let (a, b) = (with.forward(&x).unwrap(), without.forward(&x).unwrap());
        move |n, c, y, xx| a.get(n, c, y, xx) - b.get(n, c, y, xx)
    });
    assert!(diff.max_abs_diff(&x) < 1e-6);
}

#[test]
fn c2f_hidden_width_and_empty_chain() {
    let b = C2f::new(8, 8, 2, true, 0.5).unwrap();
    assert_eq!(b.cv2.in_channels(), 16);
    let mut e = C2f::new(8, 6, 0, true, 0.5).unwrap();
    randomize(&mut e, 3);
    let x = random_tensor(&mut rng(3), [1, 8, 4, 4]);
    assert_eq!(e.forward(&x).unwrap(), e.cv2.forward(&e.cv1.forward(&x).unwrap()).unwrap());
}

#[test]
fn c2f_zero_units_repeat_second_half() {
    let mut b = C2f::new(8, 8, 2, true, 0.5).unwrap();
    randomize(&mut b, 4);
    for u in &mut b.units {
        zero_learnable(u);
    }
    let x = random_tensor(&mut rng(4), [1, 8, 5, 5]);
    let y = b.cv1.forward(&x).unwrap();
    let (y0, y1) = (slice_channels(&y, 0, 4), slice_channels(&y, 4, 4));
    let want = b.cv2.forward(&cat(&[&y0, &y1, &y1, &y1])).unwrap();
    assert_eq!(b.forward(&x).unwrap(), want);
}

#[test]
fn c3k2_without_c3k_equals_c2f() {
    let mut k = C3k2::new(16, 16, 2, false, 0.5, true).unwrap();
    randomize(&mut k, 5);
    let f = C2f {
        cv1: k.cv1.clone(),
        units: k
            .units
            .iter()
            .map(|u| match u {
                CspUnit::Bottleneck(b) => b.clone(),
                CspUnit::C3k(_) => unreachable!(),
            })
            .collect(),
        cv2: k.cv2.clone(),
    };
    let x = random_tensor(&mut rng(5), [2, 16, 7, 6]);
    assert_eq!(k.forward(&x).unwrap(), f.forward(&x).unwrap());
    assert_eq!(k.num_params(), f.num_params());
    assert_eq!(C3k2::from(f.clone()).forward(&x).unwrap(), f.forward(&x).unwrap());
}

#[test]
fn c3k2_with_c3k_shape() {
    let mut k = C3k2::new(32, 32, 1, true, 0.5, true).unwrap();
    randomize(&mut k, 6);
    let x = random_tensor(&mut rng(6), [1, 32, 20, 20]);
    assert_eq!(k.forward(&x).unwrap().dims(), [1, 32, 20, 20]);
}

#[test]
fn c3k_zero_units_pass_entry_through() {
    let mut b = C3k::new(6, 8, 1, true, 0.5, 3).unwrap();
    randomize(&mut b, 7);
    for u in &mut b.units {
        zero_learnable(u);
    }
    let x = random_tensor(&mut rng(7), [1, 6, 5, 4]);
    assert_eq!(b.branch(&x).unwrap(), b.cv1.forward(&x).unwrap());
    assert_eq!(b.forward(&x).unwrap().dims(), [1, 8, 5, 4]);
}

#[test]
fn c3k_matches_straight_line_oracle() {
    let mut b = C3k::new(6, 8, 2, true, 0.5, 3).unwrap();
    randomize(&mut b, 8);
    let x = random_tensor(&mut rng(8), [2, 6, 7, 5]);
    let mut a = naive_block(&x, &b.cv1);
    for u in &b.units {
        a = add(&naive_block(&naive_block(&a, &u.cv1), &u.cv2), &a);
    }
    let bypass = naive_block(&x, &b.cv2);
    let want = naive_block(&cat(&[&a, &bypass]), &b.cv3);
    assert!(b.forward(&x).unwrap().max_abs_diff(&want) < 1e-5);
}

#[test]
fn sppf_constant_input() {
    let mut s = Sppf::new(8, 8, 5).unwrap();
    randomize(&mut s, 9);
    let x = Tensor::full([1, 8, 6, 6], 0.3);
    let h = s.cv1.forward(&x).unwrap();
    let want = s.cv2.forward(&cat(&[&h, &h, &h, &h])).unwrap();
    assert_eq!(s.forward(&x).unwrap(), want);
}

#[test]
fn sppf_shape() {
    let s = Sppf::new(64, 64, 5).unwrap();
    assert_eq!(s.forward(&Tensor::zeros([1, 64, 20, 20])).unwrap().dims(), [1, 64, 20, 20]);
}

#[test]
fn attention_matches_oracle() {
    let mut a = Attention::new(16, 2, 0.5).unwrap();
    randomize(&mut a, 11);
    let x = random_tensor(&mut rng(11), [2, 16, 3, 4]);
    let want = naive_attention(&x, &a.qkv, &a.pe, &a.proj, a.num_heads, a.key_dim, a.head_dim);
    assert!(a.forward(&x).unwrap().max_abs_diff(&want) < 1e-5);
}

#[test]
fn attention_rows_are_stochastic() {
    let mut a = Attention::new(16, 2, 0.5).unwrap();
    randomize(&mut a, 12);
    let x = random_tensor(&mut rng(12), [1, 16, 4, 4]);
    let maps = a.attention_maps(&x).unwrap();
    assert_eq!(maps.len(), 2);
    for m in maps {
        for row in m.chunks(16) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn single_token_attention_is_value_path() {
    let mut a = Attention::new(8, 1, 0.5).unwrap();
    randomize(&mut a, 13);
    let x = random_tensor(&mut rng(13), [1, 8, 1, 1]);
    let qkv = naive_block(&x, &a.qkv);
    let v = slice_channels(&qkv, 2 * a.key_dim, a.head_dim);
    let want = naive_block(&add(&v, &naive_block(&v, &a.pe)), &a.proj);
    assert!(a.forward(&x).unwrap().max_abs_diff(&want) < 1e-5);
}

#[test]
fn attention_is_permutation_equivariant_without_pe() {
    let mut a = Attention::new(8, 2, 0.5).unwrap();
    randomize(&mut a, 14);
    zero_learnable(&mut a.pe);
    let x = random_tensor(&mut rng(14), [1, 8, 2, 2]);
    // positions 0..4 of the 2×2 grid, permuted
    let perm = [2usize, 0, 3, 1];
    let permute = |t: &Tensor| {
        Tensor::from_fn(t.dims(), |n, c, y, xx| {
            let src = perm[y * 2 + xx];
            t.get(n, c, src / 2, src % 2)
        })
    };
    let lhs = a.forward(&permute(&x)).unwrap();
    let rhs = permute(&a.forward(&x).unwrap());
    assert!(lhs.max_abs_diff(&rhs) < 1e-6);
}

#[test]
fn psa_matches_straight_line_oracle() {
    let mut p = PsaBlock::new(16, 0.5, 2, true).unwrap();
    randomize(&mut p, 15);
    let x = random_tensor(&mut rng(15), [1, 16, 4, 3]);
    let a = &p.attn;
    let y = add(&x, &naive_attention(&x, &a.qkv, &a.pe, &a.proj, a.num_heads, a.key_dim, a.head_dim));
    let want = add(&y, &naive_block(&naive_block(&y, &p.ffn1), &p.ffn2));
    assert!(p.forward(&x).unwrap().max_abs_diff(&want) < 1e-5);
}

#[test]
fn c2psa_shapes_and_empty_chain() {
    let c = C2psa::new(256, 256, 1, 0.5).unwrap();
    assert_eq!(c.forward(&Tensor::zeros([1, 256, 20, 20])).unwrap().dims(), [1, 256, 20, 20]);
    let mut e = C2psa::new(16, 16, 0, 0.5).unwrap();
    randomize(&mut e, 16);
    let x = random_tensor(&mut rng(16), [1, 16, 3, 3]);
    assert_eq!(e.forward(&x).unwrap(), e.cv2.forward(&e.cv1.forward(&x).unwrap()).unwrap());
}

#[test]
fn forward_is_deterministic_and_preserves_spatial_dims() {
    let mut k = C3k2::new(16, 24, 1, true, 0.5, true).unwrap();
    randomize(&mut k, 17);
    let x = random_tensor(&mut rng(17), [2, 16, 9, 7]);
    let a = k.forward(&x).unwrap();
    assert_eq!(a, k.forward(&x).unwrap());
    assert_eq!(a.dims(), [2, 24, 9, 7]);
    let down = ConvBlock::silu(16, 8, 3, 2).unwrap();
    assert_eq!(down.forward(&x).unwrap().dims(), [2, 8, 5, 4]);
}

#[test]
fn constructor_errors() {
    assert!(Bottleneck::new(4, 8, true, (3, 3), 0.5).is_err());
    assert!(C2psa::new(16, 32, 1, 0.5).is_err());
    assert!(Sppf::new(7, 8, 5).is_err());
    assert!(Attention::new(10, 3, 0.5).is_err());
    let b = ConvBlock::silu(4, 4, 3, 1).unwrap();
    assert!(b.forward(&Tensor::zeros([1, 3, 4, 4])).is_err());
}
