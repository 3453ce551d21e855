//! Composite network blocks: Conv-BN-SiLU, bottlenecks, the CSP family
//! (C2f, C3k, C3k2), SPPF, and position-sensitive attention (PSA, C2PSA).
//!
//! Every block owns its parameters and exposes a pure `forward`. Parameters
//! are enumerated through [`Module::visit_params`] under stable dotted names,
//! which the model graph uses for initialisation, weight files and accounting.

use crate::error::{Error, Result};
use crate::ops::{
    self, affine_channels, concat_channels, conv2d, gemm_strided, maxpool2d, softmax_rows,
    Activation, BatchNormParams, ConvSpec, DEFAULT_BN_EPSILON,
};
use crate::tensor::{Dims, Tensor};

/// What a parameter tensor is, for naming and accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    Mean,
    Var,
}

impl ParamRole {
    pub fn suffix(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
            ParamRole::Mean => "mean",
            ParamRole::Var => "var",
        }
    }

    /// Running statistics are not learnable and are excluded from counts.
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamRole::Mean | ParamRole::Var)
    }
}

pub type ParamVisitor<'a> = dyn FnMut(&str, ParamRole, &[usize], &[f32]) + 'a;
pub type ParamVisitorMut<'a> = dyn FnMut(&str, ParamRole, &[usize], &mut [f32]) + 'a;

/// Common interface of every block.
pub trait Module {
    fn forward(&self, x: &Tensor) -> Result<Tensor>;

    /// Calls `f(name, role, dims, data)` for every parameter, in a fixed order.
    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_>);

    fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>);

    /// Output dims and floating-point operation count for an input of `input` dims.
    fn flops(&self, input: Dims) -> Result<(Dims, u64)>;

    /// Learnable parameter count (conv weights and biases, bn gamma and beta).
    fn num_params(&self) -> usize {
        let mut total = 0;
        self.visit_params("", &mut |_, role, _, data| {
            if role.is_learnable() {
                total += data.len();
            }
        });
        total
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn numel(d: Dims) -> u64 {
    d.iter().product::<usize>() as u64
}

fn check_channels(x: &Tensor, expected: usize) -> Result<()> {
    if x.channels() != expected {
        return Err(Error::ChannelMismatch {
            expected,
            got: x.channels(),
        });
    }
    Ok(())
}

fn visit_conv(conv: &ConvSpec, prefix: &str, f: &mut ParamVisitor<'_>) {
    let wd = conv.weight.dims();
    f(&join(prefix, "weight"), ParamRole::Weight, &wd, conv.weight.data());
    if let Some(b) = &conv.bias {
        f(&join(prefix, "bias"), ParamRole::Bias, &[b.len()], b);
    }
}

fn visit_conv_mut(conv: &mut ConvSpec, prefix: &str, f: &mut ParamVisitorMut<'_>) {
    let wd = conv.weight.dims();
    f(&join(prefix, "weight"), ParamRole::Weight, &wd, conv.weight.data_mut());
    if let Some(b) = &mut conv.bias {
        let n = b.len();
        f(&join(prefix, "bias"), ParamRole::Bias, &[n], b);
    }
}

/// Convolution, optional batch norm, optional SiLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv: ConvSpec,
    /// `None` once folded into the convolution (or for plain conv layers).
    pub bn: Option<BatchNormParams>,
    pub activation: Activation,
}

impl ConvBlock {
    /// Bias-free conv followed by identity batch norm.
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        activation: Activation,
    ) -> Result<Self> {
        Ok(ConvBlock {
            conv: ConvSpec::new(c_in, c_out, kernel, stride, groups)?,
            bn: Some(BatchNormParams::identity(c_out, DEFAULT_BN_EPSILON)),
            activation,
        })
    }

    /// Conv-BN-SiLU with `groups = 1`.
    pub fn silu(c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::new(c_in, c_out, kernel, stride, 1, Activation::Silu)
    }

    /// Conv-BN without activation.
    pub fn linear(c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Self::new(c_in, c_out, kernel, 1, 1, Activation::None)
    }

    /// Plain convolution with bias and no normalisation.
    pub fn plain(c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Ok(ConvBlock {
            conv: ConvSpec::new(c_in, c_out, kernel, 1, 1)?.with_bias(vec![0.0; c_out])?,
            bn: None,
            activation: Activation::None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }

    pub fn set_epsilon(&mut self, eps: f32) {
        if let Some(bn) = &mut self.bn {
            bn.epsilon = eps;
        }
    }

    /// Equivalent block with batch norm folded into the convolution.
    pub fn folded(&self) -> Result<ConvBlock> {
        match &self.bn {
            None => Ok(self.clone()),
            Some(bn) => Ok(ConvBlock {
                conv: ops::fold_batchnorm(&self.conv, bn)?,
                bn: None,
                activation: self.activation,
            }),
        }
    }
}

impl Module for ConvBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = conv2d(x, &self.conv)?;
        match &self.bn {
            Some(bn) => {
                if bn.channels() != self.conv.out_channels {
                    return Err(Error::ChannelMismatch {
                        expected: self.conv.out_channels,
                        got: bn.channels(),
                    });
                }
                let (scale, shift) = bn.scale_shift();
                affine_channels(&mut y, &scale, &shift, self.activation);
            }
            None if self.activation != Activation::None => {
                let act = self.activation;
                y.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            None => {}
        }
        Ok(y)
    }

    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        visit_conv(&self.conv, prefix, f);
        if let Some(bn) = &self.bn {
            let c = bn.channels();
            f(&join(prefix, "gamma"), ParamRole::Gamma, &[c], &bn.gamma);
            f(&join(prefix, "beta"), ParamRole::Beta, &[c], &bn.beta);
            f(&join(prefix, "mean"), ParamRole::Mean, &[c], &bn.running_mean);
            f(&join(prefix, "var"), ParamRole::Var, &[c], &bn.running_var);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        visit_conv_mut(&mut self.conv, prefix, f);
        if let Some(bn) = &mut self.bn {
            let c = bn.channels();
            f(&join(prefix, "gamma"), ParamRole::Gamma, &[c], &mut bn.gamma);
            f(&join(prefix, "beta"), ParamRole::Beta, &[c], &mut bn.beta);
            f(&join(prefix, "mean"), ParamRole::Mean, &[c], &mut bn.running_mean);
            f(&join(prefix, "var"), ParamRole::Var, &[c], &mut bn.running_var);
        }
    }

    fn flops(&self, input: Dims) -> Result<(Dims, u64)> {
        let [n, c, h, w] = input;
        if c != self.conv.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.conv.in_channels,
                got: c,
            });
        }
        let (ho, wo) = self.conv.output_hw(h, w)?;
        let out = [n, self.conv.out_channels, ho, wo];
        let elems = numel(out);
        let k2 = (self.conv.kernel * self.conv.kernel) as u64;
        let per_out = k2 * (self.conv.in_channels / self.conv.groups) as u64;
        let mut total = 2 * elems * per_out;
        if self.bn.is_some() || self.conv.bias.is_some() {
            total += elems;
        }
        if self.activation != Activation::None {
            total += elems;
        }
        Ok((out, total))
    }
}

/// Two convolutions with an optional residual addition.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub shortcut: bool,
}

impl Bottleneck {
    /// `hidden = floor(c_out · expansion)`; kernels of the two convolutions
    /// given by `kernels`.
    pub fn new(
        c_in: usize,
        c_out: usize,
        shortcut: bool,
        kernels: (usize, usize),
        expansion: f64,
    ) -> Result<Self> {
        if shortcut && c_in != c_out {
            return Err(Error::ChannelMismatch {
                expected: c_in,
                got: c_out,
            });
        }
        let hidden = (c_out as f64 * expansion) as usize;
        Ok(Bottleneck {
            cv1: ConvBlock::silu(c_in, hidden, kernels.0, 1)?,
            cv2: ConvBlock::silu(hidden, c_out, kernels.1, 1)?,
            shortcut,
        })
    }
}

impl Module for Bottleneck {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.cv2.forward(&self.cv1.forward(x)?)?;
        if self.shortcut {
            check_channels(x, self.cv2.out_channels())?;
            y.add_assign(x)?;
        }
        Ok(y)
    }

    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.cv1.visit_params(&join(prefix, "cv1"), f);
        self.cv2.visit_params(&join(prefix, "cv2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.cv1.visit_params_mut(&join(prefix, "cv1"), f);
        self.cv2.visit_params_mut(&join(prefix, "cv2"), f);
    }

    fn flops(&self, input: Dims) -> Result<(Dims, u64)> {
        let (d1, f1) = self.cv1.flops(input)?;
        let (d2, f2) = self.cv2.flops(d1)?;
        let add = if self.shortcut { numel(d2) } else { 0 };
        Ok((d2, f1 + f2 + add))
    }
}

/// Shared C2f topology: split the entry conv output in two, run a chain of
/// units on the second half, concatenate every intermediate and project.
fn csp_forward<U: Module>(cv1: &ConvBlock, units: &[U], cv2: &ConvBlock, x: &Tensor) -> Result<Tensor> {
    let y = cv1.forward(x)?;
    let half = y.channels() / 2;
    let (y0, y1) = y.split_channels(half)?;
    let mut outs = Vec::with_capacity(units.len() + 2);
    outs.push(y0);
    outs.push(y1);
    for u in units {
        let next = u.forward(outs.last().expect("non-empty"))?;
        outs.push(next);
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    cv2.forward(&concat_channels(&refs)?)
}

fn csp_flops<U: Module>(cv1: &ConvBlock, units: &[U], cv2: &ConvBlock, input: Dims) -> Result<(Dims, u64)> {
    let (d, mut total) = cv1.flops(input)?;
    let half = [d[0], d[1] / 2, d[2], d[3]];
    let mut cur = half;
    let mut channels = 2 * half[1];
    for u in units {
        let (next, f) = u.flops(cur)?;
        total += f;
        channels += next[1];
        cur = next;
    }
    let (out, f) = cv2.flops([d[0], channels, d[2], d[3]])?;
    Ok((out, total + f))
}

fn csp_check(cv1: &ConvBlock, n: usize, cv2: &ConvBlock) -> Result<()> {
    if cv1.out_channels() % 2 != 0 {
        return Err(Error::InvalidSpec(format!(
            "odd hidden channel count {}",
            cv1.out_channels()
        )));
    }
    let hidden = cv1.out_channels() / 2;
    if cv2.in_channels() != (2 + n) * hidden {
        return Err(Error::ChannelMismatch {
            expected: (2 + n) * hidden,
            got: cv2.in_channels(),
        });
    }
    Ok(())
}

/// CSP bottleneck with two convolutions: split, chain of bottlenecks,
/// dense concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct C2f {
    pub cv1: ConvBlock,
    pub units: Vec<Bottleneck>,
    pub cv2: ConvBlock,
}

impl C2f {
    pub fn new(c_in: usize, c_out: usize, n: usize, shortcut: bool, e: f64) -> Result<Self> {
        let c = (c_out as f64 * e) as usize;
        let units = (0..n)
            .map(|_| Bottleneck::new(c, c, shortcut, (3, 3), 1.0))
            .collect::<Result<_>>()?;
        let block = C2f {
            cv1: ConvBlock::silu(c_in, 2 * c, 1, 1)?,
            units,
            cv2: ConvBlock::silu((2 + n) * c, c_out, 1, 1)?,
        };
        csp_check(&block.cv1, n, &block.cv2)?;
        Ok(block)
    }

    pub fn hidden(&self) -> usize {
        self.cv1.out_channels() / 2
    }
}

impl Module for C2f {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        csp_forward(&self.cv1, &self.units, &self.cv2, x)
    }

    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.cv1.visit_params(&join(prefix, "cv1"), f);
        for (i, u) in self.units.iter().enumerate() {
            u.visit_params(&join(prefix, &format!("m.{i}")), f);
        }
        self.cv2.visit_params(&join(prefix, "cv2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.cv1.visit_params_mut(&join(prefix, "cv1"), f);
        for (i, u) in self.units.iter_mut().enumerate() {
            u.visit_params_mut(&join(prefix, &format!("m.{i}")), f);
        }
        self.cv2.visit_params_mut(&join(prefix, "cv2"), f);
    }

    fn flops(&self, input: Dims) -> Result<(Dims, u64)> {
        csp_flops(&self.cv1, &self.units, &self.cv2, input)
    }
}

/// CSP block without split: a bottleneck chain and a bypass conv, both fed
/// from the input, concatenated and projected.
#[derive(Clone, Debug, PartialEq)]
pub struct C3k {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub units: Vec<Bottleneck>,
    pub cv3: ConvBlock,
}

impl C3k {
    pub fn new(c_in: usize, c_out: usize, n: usize, shortcut: bool, e: f64, kernel: usize) -> Result<Self> {
        let c = (c_out as f64 * e) as usize;
        let units = (0..n)
            .map(|_| Bottleneck::new(c, c, shortcut, (kernel, kernel), 1.0))
            .collect::<Result<_>>()?;
        Ok(C3k {
            cv1: ConvBlock::silu(c_in, c, 1, 1)?,
            cv2: ConvBlock::silu(c_in, c, 1, 1)?,
            units,
            cv3: ConvBlock::silu(2 * c, c_out, 1, 1)?,
        })
    }

    /// Output of the bottleneck chain alone, before concatenation.
    pub fn branch(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.cv1.forward(x)?;
        for u in &self.units {
            y = u.forward(&y)?;
        }
        Ok(y)
    }
}

impl Module for C3k {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.branch(x)?;
        let b = self.cv2.forward(x)?;
        self.cv3.forward(&concat_channels(&[&a, &b])?)
    }

    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.cv1.visit_params(&join(prefix, "cv1"), f);
        self.cv2.visit_params(&join(prefix, "cv2"), f);
        for (i, u) in self.units.iter().enumerate() {
            u.visit_params(&join(prefix, &format!("m.{i}")), f);
        }
        self.cv3.visit_params(&join(prefix, "cv3"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.cv1.visit_params_mut(&join(prefix, "cv1"), f);
        self.cv2.visit_params_mut(&join(prefix, "cv2"), f);
        for (i, u) in self.units.iter_mut().enumerate() {
            u.visit_params_mut(&join(prefix, &format!("m.{i}")), f);
        }
        self.cv3.visit_params_mut(&join(prefix, "cv3"), f);
    }

    fn flops(&self, input: Dims) -> Result<(Dims, u64)> {
        let (mut d, mut total) = self.cv1.flops(input)?;
        for u in &self.units {
            let (nd, f) = u.flops(d)?;
            d = nd;
            total += f;
        }
        let (b, fb) = self.cv2.flops(input)?;
        let (out, f3) = self.cv3.flops([d[0], d[1] + b[1], d[2], d[3]])?;
        Ok((out, total + fb + f3))
    }
}

/// Inner unit of a [`C3k2`].
#[derive(Clone, Debug, PartialEq)]
pub enum CspUnit {
    Bottleneck(Bottleneck),
    C3k(C3k),
}

impl Module for CspUnit {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            CspUnit::Bottleneck(b) => b.forward(x),
            CspUnit::C3k(b) => b.forward(x),
        }
    }

    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        match self {
            CspUnit::Bottleneck(b) => b.visit_params(prefix, f),
            CspUnit::C3k(b) => b.visit_params(prefix, f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        match self {
            CspUnit::Bottleneck(b) => b.visit_params_mut(prefix, f),
            CspUnit::C3k(b) => b.visit_params_mut(prefix, f),
        }
    }

    fn flops(&self, input: Dims) -> Result<(Dims, u64)> {
        match self {
            CspUnit::Bottleneck(b) => b.flops(input),
            CspUnit::C3k(b) => b.flops(input),
        }
    }
}

/// C2f topology whose inner units are either bottlenecks or C3k blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct C3k2 {
    pub cv1: ConvBlock,
    pub units: Vec<CspUnit>,
    pub cv2: ConvBlock,
}

impl C3k2 {
    /// `hidden = floor(c_out · e)`. With `c3k` each unit is a two-bottleneck
    /// C3k; otherwise a 3×3/3×3 bottleneck with half-width hidden layer.
    pub fn new(c_in: usize, c_out: usize, n: usize, c3k: bool, e: f64, shortcut: bool) -> Result<Self> {
        let c = (c_out as f64 * e) as usize;
        let units = (0..n)
            .map(|_| {
                Ok(if c3k {
                    CspUnit::C3k(C3k::new(c, c, 2, shortcut, 0.5, 3)?)
                } else {
                    CspUnit::Bottleneck(Bottleneck::new(c, c, shortcut, (3, 3), 0.5)?)
                })
            })
            .collect::<Result<_>>()?;
        let block = C3k2 {
            cv1: ConvBlock::silu(c_in, 2 * c, 1, 1)?,
            units,
            cv2: ConvBlock::silu((2 + n) * c, c_out, 1, 1)?,
        };
        csp_check(&block.cv1, n, &block.cv2)?;
        Ok(block)
    }

    pub fn hidden(&self) -> usize {
        self.cv1.out_channels() / 2
    }
}

impl From<C2f> for C3k2 {
    fn from(b: C2f) -> Self {
        C3k2 {
            cv1: b.cv1,
            units: b.units.into_iter().map(CspUnit::Bottleneck).collect(),
            cv2: b.cv2,
        }
    }
}

impl Module for C3k2 {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        csp_forward(&self.cv1, &self.units, &self.cv2, x)
    }

    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.cv1.visit_params(&join(prefix, "cv1"), f);
        for (i, u) in self.units.iter().enumerate() {
            u.visit_params(&join(prefix, &format!("m.{i}")), f);
        }
        self.cv2.visit_params(&join(prefix, "cv2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.cv1.visit_params_mut(&join(prefix, "cv1"), f);
        for (i, u) in self.units.iter_mut().enumerate() {
            u.visit_params_mut(&join(prefix, &format!("m.{i}")), f);
        }
        self.cv2.visit_params_mut(&join(prefix, "cv2"), f);
    }

    fn flops(&self, input: Dims) -> Result<(Dims, u64)> {
        csp_flops(&self.cv1, &self.units, &self.cv2, input)
    }
}

/// Spatial pyramid pooling, fast form: three chained max-pools of the same
/// kernel, concatenated with their input.
#[derive(Clone, Debug, PartialEq)]
pub struct Sppf {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub pool_kernel: usize,
}

impl Sppf {
    pub fn new(c_in: usize, c_out: usize, pool_kernel: usize) -> Result<Self> {
        if c_in % 2 != 0 {
            return Err(Error::InvalidSpec(format!("SPPF needs even input channels, got {c_in}")));
        }
        let c = c_in / 2;
        Ok(Sppf {
            cv1: ConvBlock::silu(c_in, c, 1, 1)?,
            cv2: ConvBlock::silu(4 * c, c_out, 1, 1)?,
            pool_kernel,
        })
    }

    fn pool(&self, x: &Tensor) -> Result<Tensor> {
        maxpool2d(x, self.pool_kernel, 1, self.pool_kernel / 2)
    }
}

impl Module for Sppf {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.cv1.forward(x)?;
        let p1 = self.pool(&h)?;
        let p2 = self.pool(&p1)?;
        let p3 = self.pool(&p2)?;
        self.cv2.forward(&concat_channels(&[&h, &p1, &p2, &p3])?)
    }

    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.cv1.visit_params(&join(prefix, "cv1"), f);
        self.cv2.visit_params(&join(prefix, "cv2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.cv1.visit_params_mut(&join(prefix, "cv1"), f);
        self.cv2.visit_params_mut(&join(prefix, "cv2"), f);
    }

    fn flops(&self, input: Dims) -> Result<(Dims, u64)> {
        let (d, f1) = self.cv1.flops(input)?;
        // k² comparisons per pooled element, three pools.
        let pools = 3 * numel(d) * (self.pool_kernel * self.pool_kernel) as u64;
        let (out, f2) = self.cv2.flops([d[0], 4 * d[1], d[2], d[3]])?;
        Ok((out, f1 + pools + f2))
    }
}

/// Multi-head self-attention over spatial positions with a depthwise 3×3
/// positional encoding on the values.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub num_heads: usize,
    pub key_dim: usize,
    pub head_dim: usize,
    pub qkv: ConvBlock,
    pub proj: ConvBlock,
    pub pe: ConvBlock,
}

impl Attention {
    pub fn new(dim: usize, num_heads: usize, attn_ratio: f64) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(Error::InvalidSpec(format!(
                "{dim} channels not divisible into {num_heads} heads"
            )));
        }
        let head_dim = dim / num_heads;
        let key_dim = (head_dim as f64 * attn_ratio) as usize;
        let qkv_out = dim + 2 * key_dim * num_heads;
        Ok(Attention {
            num_heads,
            key_dim,
            head_dim,
            qkv: ConvBlock::linear(dim, qkv_out, 1)?,
            proj: ConvBlock::linear(dim, dim, 1)?,
            pe: ConvBlock::new(dim, dim, 3, 1, dim, Activation::None)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.proj.out_channels()
    }

    fn scale(&self) -> f32 {
        1.0 / (self.key_dim as f32).sqrt()
    }

    /// Runs attention and returns `(mixed values + pe, attention maps)`.
    /// Maps are `N×N` row-stochastic matrices, one per (batch, head), query-major.
    fn attend(&self, x: &Tensor, keep_maps: bool) -> Result<(Tensor, Vec<Vec<f32>>)> {
        let [b, c, h, w] = x.dims();
        if c != self.dim() {
            return Err(Error::ChannelMismatch {
                expected: self.dim(),
                got: c,
            });
        }
        let n = h * w;
        let (kd, hd) = (self.key_dim, self.head_dim);
        let per_head = 2 * kd + hd;
        let qkv = self.qkv.forward(x)?;
        let mut mixed = vec![0.0f32; b * c * n];
        let mut values = Vec::with_capacity(b * c * n);
        let mut maps = Vec::new();
        let mut scores = vec![0.0f32; n * n];
        for bi in 0..b {
            for head in 0..self.num_heads {
                let base = (bi * self.num_heads + head) * per_head * n;
                let q = &qkv.data()[base..base + kd * n];
                let k = &qkv.data()[base + kd * n..base + 2 * kd * n];
                let v = &qkv.data()[base + 2 * kd * n..base + per_head * n];
                values.extend_from_slice(v);
                // scores[i][j] = Σ_d q[d][i] k[d][j]
                gemm_strided(n, kd, n, q, (1, n as isize), k, (n as isize, 1), &mut scores);
                let s = self.scale();
                scores.iter_mut().for_each(|v| *v *= s);
                softmax_rows(&mut scores, n);
                // out[ch][i] = Σ_j v[ch][j] scores[i][j]
                let dst = &mut mixed[(bi * c + head * hd) * n..(bi * c + (head + 1) * hd) * n];
                gemm_strided(hd, n, n, v, (n as isize, 1), &scores, (1, n as isize), dst);
                if keep_maps {
                    maps.push(scores.clone());
                }
            }
        }
        let v = Tensor::new([b, c, h, w], values)?;
        let mut out = Tensor::new([b, c, h, w], mixed)?;
        out.add_assign(&self.pe.forward(&v)?)?;
        Ok((out, maps))
    }

    /// Softmax attention weights, one `N×N` matrix per (batch, head).
    pub fn attention_maps(&self, x: &Tensor) -> Result<Vec<Vec<f32>>> {
        Ok(self.attend(x, true)?.1)
    }
}

impl Module for Attention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (mixed, _) = self.attend(x, false)?;
        self.proj.forward(&mixed)
    }

    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.qkv.visit_params(&join(prefix, "qkv"), f);
        self.proj.visit_params(&join(prefix, "proj"), f);
        self.pe.visit_params(&join(prefix, "pe"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.qkv.visit_params_mut(&join(prefix, "qkv"), f);
        self.proj.visit_params_mut(&join(prefix, "proj"), f);
        self.pe.visit_params_mut(&join(prefix, "pe"), f);
    }

    fn flops(&self, input: Dims) -> Result<(Dims, u64)> {
        let [b, c, h, w] = input;
        let (_, f_qkv) = self.qkv.flops(input)?;
        let (_, f_pe) = self.pe.flops(input)?;
        let (out, f_proj) = self.proj.flops(input)?;
        let n = (h * w) as u64;
        let heads = (b * self.num_heads) as u64;
        let (kd, hd) = (self.key_dim as u64, self.head_dim as u64);
        // q·k, scaling, softmax (exp, sum, divide), weighted sum of values
        let matmuls = heads * (2 * n * n * kd + n * n + 3 * n * n + 2 * hd * n * n);
        let pe_add = (b * c) as u64 * n;
        Ok((out, f_qkv + f_pe + f_proj + matmuls + pe_add))
    }
}

/// Attention followed by a two-layer pointwise feed-forward, each wrapped in
/// a residual addition.
#[derive(Clone, Debug, PartialEq)]
pub struct PsaBlock {
    pub attn: Attention,
    pub ffn1: ConvBlock,
    pub ffn2: ConvBlock,
    pub shortcut: bool,
}

impl PsaBlock {
    pub fn new(c: usize, attn_ratio: f64, num_heads: usize, shortcut: bool) -> Result<Self> {
        Ok(PsaBlock {
            attn: Attention::new(c, num_heads, attn_ratio)?,
            ffn1: ConvBlock::silu(c, 2 * c, 1, 1)?,
            ffn2: ConvBlock::linear(2 * c, c, 1)?,
            shortcut,
        })
    }
}

impl Module for PsaBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.attn.forward(x)?;
        let y = if self.shortcut { x.add(&a)? } else { a };
        let f = self.ffn2.forward(&self.ffn1.forward(&y)?)?;
        if self.shortcut {
            y.add(&f)
        } else {
            Ok(f)
        }
    }

    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.ffn1.visit_params(&join(prefix, "ffn.0"), f);
        self.ffn2.visit_params(&join(prefix, "ffn.1"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.attn.visit_params_mut(&join(prefix, "attn"), f);
        self.ffn1.visit_params_mut(&join(prefix, "ffn.0"), f);
        self.ffn2.visit_params_mut(&join(prefix, "ffn.1"), f);
    }

    fn flops(&self, input: Dims) -> Result<(Dims, u64)> {
        let (d, fa) = self.attn.flops(input)?;
        let (d1, f1) = self.ffn1.flops(d)?;
        let (out, f2) = self.ffn2.flops(d1)?;
        let adds = if self.shortcut { 2 * numel(out) } else { 0 };
        Ok((out, fa + f1 + f2 + adds))
    }
}

/// Heads used by a PSA block of `channels` width: one per 64 channels, at least one.
pub fn psa_heads(channels: usize) -> usize {
    (channels / 64).max(1)
}

/// CSP wrapper around a chain of PSA blocks applied to one half of the
/// entry conv output.
#[derive(Clone, Debug, PartialEq)]
pub struct C2psa {
    pub cv1: ConvBlock,
    pub blocks: Vec<PsaBlock>,
    pub cv2: ConvBlock,
}

impl C2psa {
    pub fn new(c_in: usize, c_out: usize, n: usize, e: f64) -> Result<Self> {
        if c_in != c_out {
            return Err(Error::ChannelMismatch {
                expected: c_in,
                got: c_out,
            });
        }
        let c = (c_in as f64 * e) as usize;
        let blocks = (0..n)
            .map(|_| PsaBlock::new(c, 0.5, psa_heads(c), true))
            .collect::<Result<_>>()?;
        Ok(C2psa {
            cv1: ConvBlock::silu(c_in, 2 * c, 1, 1)?,
            blocks,
            cv2: ConvBlock::silu(2 * c, c_in, 1, 1)?,
        })
    }
}

impl Module for C2psa {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.cv1.forward(x)?;
        let half = y.channels() / 2;
        let (a, mut b) = y.split_channels(half)?;
        for blk in &self.blocks {
            b = blk.forward(&b)?;
        }
        self.cv2.forward(&concat_channels(&[&a, &b])?)
    }

    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.cv1.visit_params(&join(prefix, "cv1"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("m.{i}")), f);
        }
        self.cv2.visit_params(&join(prefix, "cv2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.cv1.visit_params_mut(&join(prefix, "cv1"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("m.{i}")), f);
        }
        self.cv2.visit_params_mut(&join(prefix, "cv2"), f);
    }

    fn flops(&self, input: Dims) -> Result<(Dims, u64)> {
        let (d, mut total) = self.cv1.flops(input)?;
        let mut half = [d[0], d[1] / 2, d[2], d[3]];
        for b in &self.blocks {
            let (nd, f) = b.flops(half)?;
            half = nd;
            total += f;
        }
        let (out, f) = self.cv2.flops(d)?;
        Ok((out, total + f))
    }
}
