//! Numerical kernels: convolution, batch-norm folding, activations, pooling,
//! upsampling, concatenation and row softmax.
//!
//! Every kernel is a pure function of its inputs. Work may be split across the
//! rayon pool, but each output element is always reduced in the same order, so
//! results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

/// Output rows handed to one GEMM task. A multiple of every micro-kernel
/// height so tiling is identical regardless of how tasks are scheduled.
const GEMM_ROW_BLOCK: usize = 64;

/// A 2-D convolution with square kernel, zero padding `kernel / 2` and
/// dilation 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    /// `[out_channels, in_channels / groups, kernel, kernel]`
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
}

impl ConvSpec {
    /// A zero-initialised convolution without bias.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || groups == 0 {
            return Err(Error::InvalidSpec(format!(
                "kernel ({kernel}), stride ({stride}) and groups ({groups}) must be positive"
            )));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::InvalidSpec(format!(
                "channels {in_channels}->{out_channels} not divisible by groups {groups}"
            )));
        }
        Ok(ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            groups,
            weight: Tensor::zeros([out_channels, in_channels / groups, kernel, kernel]),
            bias: None,
        })
    }

    pub fn with_weight(mut self, weight: Tensor) -> Result<Self> {
        let expected = self.weight_dims();
        if weight.dims() != expected {
            return Err(Error::Shape(format!(
                "conv weight dims {:?}, expected {:?}",
                weight.dims(),
                expected
            )));
        }
        self.weight = weight;
        Ok(self)
    }

    pub fn with_bias(mut self, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != self.out_channels {
            return Err(Error::Shape(format!(
                "conv bias length {}, expected {}",
                bias.len(),
                self.out_channels
            )));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn weight_dims(&self) -> Dims {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    /// Spatial output size for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            pooled_len(h, self.kernel, self.stride, self.padding())?,
            pooled_len(w, self.kernel, self.stride, self.padding())?,
        ))
    }

    fn validate(&self) -> Result<()> {
        if self.weight.dims() != self.weight_dims() {
            return Err(Error::Shape(format!(
                "conv weight dims {:?}, expected {:?}",
                self.weight.dims(),
                self.weight_dims()
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_channels {
                return Err(Error::Shape(format!(
                    "conv bias length {}, expected {}",
                    b.len(),
                    self.out_channels
                )));
            }
        }
        Ok(())
    }
}

/// Inference-time batch-norm statistics and affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
}

pub const DEFAULT_BN_EPSILON: f32 = 1e-3;

impl BatchNormParams {
    /// gamma = 1, beta = 0, mean = 0, var = 1.
    pub fn identity(channels: usize, epsilon: f32) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::Shape("batch-norm parameter lengths differ".into()));
        }
        if self.epsilon < 0.0 || self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidSpec(
                "batch-norm variance and epsilon must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` so that `bn(x) = x * scale + shift`.
    pub fn scale_shift(&self) -> (Vec<f32>, Vec<f32>) {
        let scale: Vec<f32> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(g, v)| g / (v + self.epsilon).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.running_mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        (scale, shift)
    }

    /// Applies the normalisation to every channel of `x`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.validate()?;
        if x.channels() != self.channels() {
            return Err(Error::ChannelMismatch {
                expected: self.channels(),
                got: x.channels(),
            });
        }
        let (scale, shift) = self.scale_shift();
        let mut out = x.clone();
        affine_channels(&mut out, &scale, &shift, Activation::None);
        Ok(out)
    }
}

/// Elementwise non-linearity applied after a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f32) -> f32 {
        match self {
            Activation::None => v,
            Activation::Silu => silu_scalar(v),
        }
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f32) -> f32 {
    x * sigmoid_scalar(x)
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

pub fn silu(input: &Tensor) -> Tensor {
    input.map(silu_scalar)
}

/// In place `x[n, c] = act(x[n, c] * scale[c] + shift[c])`.
pub(crate) fn affine_channels(x: &mut Tensor, scale: &[f32], shift: &[f32], act: Activation) {
    let [_, c, h, w] = x.dims();
    let hw = h * w;
    if hw == 0 {
        return;
    }
    for (i, plane) in x.data_mut().chunks_mut(hw).enumerate() {
        let (s, t) = (scale[i % c], shift[i % c]);
        for v in plane {
            *v = act.apply(*v * s + t);
        }
    }
}

/// `floor((len + 2·pad − k) / stride) + 1`, or an error when non-positive.
pub fn pooled_len(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k || stride == 0 {
        return Err(Error::Shape(format!(
            "non-positive output size: extent {len}, kernel {k}, stride {stride}, padding {pad}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// 2-D convolution with zero padding.
///
/// Dense and grouped convolutions lower to im2col + GEMM; depthwise
/// convolutions (one input channel per group) use a direct loop.
pub fn conv2d(input: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let [n, c, h, w] = input.dims();
    if c != spec.in_channels {
        return Err(Error::ChannelMismatch {
            expected: spec.in_channels,
            got: c,
        });
    }
    let (ho, wo) = spec.output_hw(h, w)?;
    let mut out = Tensor::zeros([n, spec.out_channels, ho, wo]);
    if out.is_empty() {
        return Ok(out);
    }
    let cin_g = spec.in_channels / spec.groups;
    if cin_g == 1 && spec.groups > 1 {
        conv_depthwise(input, spec, &mut out);
    } else {
        conv_gemm(input, spec, &mut out);
    }
    if let Some(bias) = &spec.bias {
        let hw = ho * wo;
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let b = bias[i % spec.out_channels];
            for v in plane {
                *v += b;
            }
        }
    }
    Ok(out)
}

fn conv_gemm(input: &Tensor, spec: &ConvSpec, out: &mut Tensor) {
    let [n, c, h, w] = input.dims();
    let [_, cout, ho, wo] = out.dims();
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding());
    let cin_g = c / spec.groups;
    let cout_g = cout / spec.groups;
    let kdim = cin_g * k * k;
    let hw_in = h * w;
    let hw_out = ho * wo;
    let pointwise = k == 1 && s == 1;
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![0.0f32; kdim * hw_out]
    };
    let weight = spec.weight.data();
    let out_data = out.data_mut();
    for bi in 0..n {
        for g in 0..spec.groups {
            let in_start = (bi * c + g * cin_g) * hw_in;
            let group_in = &input.data()[in_start..in_start + cin_g * hw_in];
            let b_mat: &[f32] = if pointwise {
                group_in
            } else {
                im2col(group_in, cin_g, h, w, k, s, p, ho, wo, &mut cols);
                &cols
            };
            let a_mat = &weight[g * cout_g * kdim..(g + 1) * cout_g * kdim];
            let out_start = (bi * cout + g * cout_g) * hw_out;
            let c_mat = &mut out_data[out_start..out_start + cout_g * hw_out];
            gemm(cout_g, kdim, hw_out, a_mat, b_mat, c_mat);
        }
    }
}

/// Unrolls receptive fields into a `(cin·k·k) × (ho·wo)` row-major matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f32],
) {
    let hw_out = ho * wo;
    for ci in 0..cin {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                let (x_lo, x_hi) = valid_range(w, wo, kx, s, p);
                for oy in 0..ho {
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize || x_lo >= x_hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    line[..x_lo].fill(0.0);
                    line[x_hi..].fill(0.0);
                    if s == 1 {
                        let ix0 = x_lo + kx - p;
                        line[x_lo..x_hi].copy_from_slice(&src_row[ix0..ix0 + (x_hi - x_lo)]);
                    } else {
                        for (ox, v) in line[x_lo..x_hi].iter_mut().enumerate() {
                            *v = src_row[(ox + x_lo) * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

/// Range of output columns `[lo, hi)` whose input column `ox·s + kx − p`
/// falls inside `[0, w)`.
fn valid_range(w: usize, wo: usize, kx: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    // ox·s + kx − p ≤ w − 1  ⇔  ox ≤ (w − 1 + p − kx) / s
    let hi = if w + p > kx {
        ((w - 1 + p - kx) / s + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn conv_depthwise(input: &Tensor, spec: &ConvSpec, out: &mut Tensor) {
    let [_, c, h, w] = input.dims();
    let [_, cout, ho, wo] = out.dims();
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding());
    let mult = cout / spec.groups;
    let weight = spec.weight.data();
    out.data_mut()
        .par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (bi, oc) = (idx / cout, idx % cout);
            let ic = oc / mult;
            let plane = &input.data()[(bi * c + ic) * h * w..(bi * c + ic + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[(oc * k + ky) * k + kx];
                    let (x_lo, x_hi) = valid_range(w, wo, kx, s, p);
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        for ox in x_lo..x_hi {
                            line[ox] += wv * src_row[ox * s + kx - p];
                        }
                    }
                }
            }
        });
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    gemm_strided(m, k, n, a, (k as isize, 1), b, (n as isize, 1), c);
}

/// `c = a · b` where `a` and `b` are addressed through `(row, col)` strides
/// and `c` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    c: &mut [f32],
) {
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    let max_index = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        (rows - 1) as isize * rs + (cols - 1) as isize * cs
    };
    assert!((max_index(m, k, a_strides) as usize) < a.len());
    assert!((max_index(k, n, b_strides) as usize) < b.len());
    c.par_chunks_mut(GEMM_ROW_BLOCK * n)
        .enumerate()
        .for_each(|(blk, c_blk)| {
            let rows = c_blk.len() / n;
            let a_off = (blk * GEMM_ROW_BLOCK) as isize * a_strides.0;
            // SAFETY: bounds of a, b and c were asserted above for the full
            // problem; each task reads rows [blk·B, blk·B + rows) of `a` and
            // writes only its own disjoint chunk of `c`.
            unsafe {
                matrixmultiply::sgemm(
                    rows,
                    k,
                    n,
                    1.0,
                    a.as_ptr().offset(a_off),
                    a_strides.0,
                    a_strides.1,
                    b.as_ptr(),
                    b_strides.0,
                    b_strides.1,
                    0.0,
                    c_blk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
}

/// Folds inference batch-norm into the preceding convolution.
///
/// With `s = gamma / sqrt(var + eps)`, the folded weight is `w·s` per output
/// channel and the folded bias is `(b − mean)·s + beta`.
pub fn fold_batchnorm(spec: &ConvSpec, bn: &BatchNormParams) -> Result<ConvSpec> {
    spec.validate()?;
    bn.validate()?;
    if bn.channels() != spec.out_channels {
        return Err(Error::ChannelMismatch {
            expected: spec.out_channels,
            got: bn.channels(),
        });
    }
    let (scale, _) = bn.scale_shift();
    let mut folded = spec.clone();
    let per_out = folded.weight.len() / spec.out_channels.max(1);
    if per_out > 0 {
        for (oc, chunk) in folded.weight.data_mut().chunks_mut(per_out).enumerate() {
            for v in chunk {
                *v *= scale[oc];
            }
        }
    }
    let bias = (0..spec.out_channels)
        .map(|oc| {
            let b = spec.bias.as_ref().map_or(0.0, |b| b[oc]);
            (b - bn.running_mean[oc]) * scale[oc] + bn.beta[oc]
        })
        .collect();
    folded.bias = Some(bias);
    Ok(folded)
}

/// Max pooling with `−∞` padding, so padded cells never win.
///
/// Computed separably (rows, then columns); max is exact, so this equals the
/// direct 2-D window maximum bit for bit.
pub fn maxpool2d(input: &Tensor, k: usize, stride: usize, padding: usize) -> Result<Tensor> {
    if k == 0 || stride == 0 {
        return Err(Error::InvalidSpec("pool kernel and stride must be positive".into()));
    }
    if padding > k / 2 {
        return Err(Error::InvalidSpec(format!(
            "pool padding {padding} exceeds half the kernel {k}"
        )));
    }
    let [n, c, h, w] = input.dims();
    let ho = pooled_len(h, k, stride, padding)?;
    let wo = pooled_len(w, k, stride, padding)?;
    let mut out = Tensor::zeros([n, c, ho, wo]);
    if out.is_empty() {
        return Ok(out);
    }
    let window = |len: usize, o: usize| {
        let start = (o * stride) as isize - padding as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + k as isize) as usize).min(len);
        (lo, hi)
    };
    out.data_mut()
        .par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(idx, dst)| {
            let plane = &input.data()[idx * h * w..(idx + 1) * h * w];
            let mut rows = vec![f32::NEG_INFINITY; h * wo];
            for y in 0..h {
                let src = &plane[y * w..(y + 1) * w];
                for ox in 0..wo {
                    let (lo, hi) = window(w, ox);
                    rows[y * wo + ox] = src[lo..hi].iter().copied().fold(f32::NEG_INFINITY, f32::max);
                }
            }
            for oy in 0..ho {
                let (lo, hi) = window(h, oy);
                let line = &mut dst[oy * wo..(oy + 1) * wo];
                line.fill(f32::NEG_INFINITY);
                for y in lo..hi {
                    for (d, &v) in line.iter_mut().zip(&rows[y * wo..(y + 1) * wo]) {
                        *d = d.max(v);
                    }
                }
            }
        });
    Ok(out)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample_nearest2x(input: &Tensor) -> Tensor {
    let [n, c, h, w] = input.dims();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    if out.is_empty() {
        return out;
    }
    for (src, dst) in input
        .data()
        .chunks(h * w)
        .zip(out.data_mut().chunks_mut(4 * h * w))
    {
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let (top, bottom) = dst[2 * y * 2 * w..(2 * y + 2) * 2 * w].split_at_mut(2 * w);
            for (x, &v) in row.iter().enumerate() {
                top[2 * x] = v;
                top[2 * x + 1] = v;
            }
            bottom.copy_from_slice(top);
        }
    }
    out
}

/// Concatenates along channels, preserving argument order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let [n, _, h, w] = first.dims();
    for p in parts {
        let [pn, _, ph, pw] = p.dims();
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::Shape(format!(
                "concat mismatch: {:?} vs {:?}",
                first.dims(),
                p.dims()
            )));
        }
    }
    let c_total: usize = parts.iter().map(|p| p.channels()).sum();
    let mut data = Vec::with_capacity(n * c_total * h * w);
    for bi in 0..n {
        for p in parts {
            let block = p.channels() * h * w;
            data.extend_from_slice(&p.data()[bi * block..(bi + 1) * block]);
        }
    }
    Tensor::new([n, c_total, h, w], data)
}

/// Softmax over each contiguous row of length `row_len`, with max subtraction.
pub fn softmax_rows(data: &mut [f32], row_len: usize) {
    if row_len == 0 {
        return;
    }
    for row in data.chunks_mut(row_len) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}
