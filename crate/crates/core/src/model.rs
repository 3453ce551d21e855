//! Declarative backbone / neck / head graph for the n, s, m, l and x scaling
//! variants, with parameter and FLOP accounting, seeded initialisation and
//! weight loading.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{join, C2psa, CspUnit, C3k2, ConvBlock, Module, ParamRole, ParamVisitor, ParamVisitorMut, Sppf};
use crate::error::{Error, Result};
use crate::io::WeightEntry;
use crate::ops::{concat_channels, upsample_nearest2x, Activation, DEFAULT_BN_EPSILON};
use crate::tensor::{Dims, Tensor};

/// Strides of the three detection scales.
pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const DEFAULT_REG_MAX: usize = 16;
pub const DEFAULT_NUM_CLASSES: usize = 80;
pub const DEFAULT_INPUT_SIZE: usize = 640;

/// Depth / width multipliers of one scaling variant.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantSpec {
    pub name: String,
    pub depth_multiple: f64,
    pub width_multiple: f64,
    pub max_channels: usize,
    /// Use C3k inner units in every C3k2 layer, not only the deep ones.
    pub force_c3k: bool,
}

impl VariantSpec {
    pub const NAMES: [&'static str; 5] = ["n", "s", "m", "l", "x"];

    pub fn from_name(name: &str) -> Result<Self> {
        let (d, w, mc) = match name {
            "n" => (0.50, 0.25, 1024),
            "s" => (0.50, 0.50, 1024),
            "m" => (0.50, 1.00, 512),
            "l" => (1.00, 1.00, 512),
            "x" => (1.00, 1.50, 512),
            other => return Err(Error::InvalidVariant(other.to_string())),
        };
        Ok(VariantSpec {
            name: name.to_string(),
            depth_multiple: d,
            width_multiple: w,
            max_channels: mc,
            force_c3k: matches!(name, "m" | "l" | "x"),
        })
    }

    /// Base channel count scaled by width, capped, rounded to a multiple of 8.
    ///
    /// The cap applies to the base width before scaling.
    pub fn channels(&self, base: usize) -> usize {
        let scaled = base.min(self.max_channels) as f64 * self.width_multiple;
        (((scaled / 8.0).round() as usize) * 8).max(8)
    }

    /// Base unit count scaled by depth, ceil-rounded, at least one.
    pub fn depth(&self, base: usize) -> usize {
        if base == 0 {
            return 0;
        }
        ((base as f64 * self.depth_multiple).ceil() as usize).max(1)
    }
}

impl FromStr for VariantSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_name(s)
    }
}

/// Model configuration, readable from a `key = value` text file.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: VariantSpec,
    pub num_classes: usize,
    pub reg_max: usize,
    pub bn_epsilon: f32,
}

impl ModelConfig {
    pub fn new(variant: &str, num_classes: usize) -> Result<Self> {
        Ok(ModelConfig {
            variant: VariantSpec::from_name(variant)?,
            num_classes,
            reg_max: DEFAULT_REG_MAX,
            bn_epsilon: DEFAULT_BN_EPSILON,
        })
    }

    /// Parses `key = value` lines; `#` starts a comment.
    ///
    /// Keys: `variant`, `num_classes`, `reg_max`, `bn_epsilon`,
    /// `depth_multiple`, `width_multiple`, `max_channels`, `force_c3k`.
    /// `variant` is applied first so the remaining keys override it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            pairs.push((lineno + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let variant = pairs
            .iter()
            .rev()
            .find(|(_, k, _)| k == "variant")
            .map(|(_, _, v)| v.as_str())
            .unwrap_or("n");
        let mut cfg = ModelConfig::new(variant, DEFAULT_NUM_CLASSES)?;
        for (lineno, k, v) in &pairs {
            let bad = |what: &str| Error::Config(format!("line {lineno}: invalid {what} '{v}'"));
            match k.as_str() {
                "variant" => {}
                "num_classes" => cfg.num_classes = v.parse().map_err(|_| bad(k))?,
                "reg_max" => cfg.reg_max = v.parse().map_err(|_| bad(k))?,
                "bn_epsilon" => cfg.bn_epsilon = v.parse().map_err(|_| bad(k))?,
                "depth_multiple" => cfg.variant.depth_multiple = v.parse().map_err(|_| bad(k))?,
                "width_multiple" => cfg.variant.width_multiple = v.parse().map_err(|_| bad(k))?,
                "max_channels" => cfg.variant.max_channels = v.parse().map_err(|_| bad(k))?,
                "force_c3k" => cfg.variant.force_c3k = v.parse().map_err(|_| bad(k))?,
                other => return Err(Error::Config(format!("line {lineno}: unknown key '{other}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.variant;
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.reg_max == 0 {
            return Err(Error::Config("reg_max must be at least 1".into()));
        }
        if !(v.depth_multiple > 0.0 && v.width_multiple > 0.0) || v.max_channels == 0 {
            return Err(Error::Config("multipliers and max_channels must be positive".into()));
        }
        if !(self.bn_epsilon > 0.0) {
            return Err(Error::Config("bn_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Kind of a layer and its (already scaled) arguments.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv { c_out: usize, kernel: usize, stride: usize },
    C3k2 { c_out: usize, n: usize, c3k: bool, e: f64 },
    Sppf { c_out: usize, pool_kernel: usize },
    C2psa { c_out: usize, n: usize },
    Upsample,
    Concat,
    Detect { num_classes: usize, reg_max: usize },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "Conv",
            LayerKind::C3k2 { .. } => "C3k2",
            LayerKind::Sppf { .. } => "SPPF",
            LayerKind::C2psa { .. } => "C2PSA",
            LayerKind::Upsample => "Upsample",
            LayerKind::Concat => "Concat",
            LayerKind::Detect { .. } => "Detect",
        }
    }
}

/// One entry of the layer list. `from` holds absolute indices of earlier layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub index: usize,
    pub from: Vec<usize>,
    pub kind: LayerKind,
}

/// Unscaled layer table: `(from, kind)` where `from` uses −1 for "previous".
/// Channel and unit counts here are base values before variant scaling.
#[rustfmt::skip]
fn base_layers() -> Vec<(Vec<isize>, LayerKind)> {
    use LayerKind::*;
    let conv = |c_out, stride| Conv { c_out, kernel: 3, stride };
    let c3k2 = |c_out, c3k, e| C3k2 { c_out, n: 2, c3k, e };
    vec![
        // backbone
        (vec![-1], conv(64, 2)),                 // 0  P1/2
        (vec![-1], conv(128, 2)),                // 1  P2/4
        (vec![-1], c3k2(256, false, 0.25)),      // 2
        (vec![-1], conv(256, 2)),                // 3  P3/8
        (vec![-1], c3k2(512, false, 0.25)),      // 4
        (vec![-1], conv(512, 2)),                // 5  P4/16
        (vec![-1], c3k2(512, true, 0.5)),        // 6
        (vec![-1], conv(1024, 2)),               // 7  P5/32
        (vec![-1], c3k2(1024, true, 0.5)),       // 8
        (vec![-1], Sppf { c_out: 1024, pool_kernel: 5 }), // 9
        (vec![-1], C2psa { c_out: 1024, n: 2 }), // 10
        // top-down path
        (vec![-1], Upsample),                    // 11
        (vec![-1, 6], Concat),                   // 12
        (vec![-1], c3k2(512, false, 0.5)),       // 13
        (vec![-1], Upsample),                    // 14
        (vec![-1, 4], Concat),                   // 15
        (vec![-1], c3k2(256, false, 0.5)),       // 16 P3 out
        // bottom-up path
        (vec![-1], conv(256, 2)),                // 17
        (vec![-1, 13], Concat),                  // 18
        (vec![-1], c3k2(512, false, 0.5)),       // 19 P4 out
        (vec![-1], conv(512, 2)),                // 20
        (vec![-1, 10], Concat),                  // 21
        (vec![-1], c3k2(1024, true, 0.5)),       // 22 P5 out
        (vec![16, 19, 22], Detect { num_classes: 0, reg_max: 0 }), // 23
    ]
}

/// Anchor-free head: per scale, a box-distribution branch (4·reg_max
/// channels) and a class-logit branch (num_classes channels).
#[derive(Clone, Debug, PartialEq)]
pub struct DetectHead {
    pub num_classes: usize,
    pub reg_max: usize,
    pub box_branches: Vec<Vec<ConvBlock>>,
    pub cls_branches: Vec<Vec<ConvBlock>>,
}

impl DetectHead {
    pub fn new(num_classes: usize, reg_max: usize, in_channels: &[usize]) -> Result<Self> {
        let c0 = in_channels[0];
        let c_box = 16.max(c0 / 4).max(reg_max * 4);
        let c_cls = c0.max(num_classes.min(100));
        let mut box_branches = Vec::new();
        let mut cls_branches = Vec::new();
        for &ch in in_channels {
            box_branches.push(vec![
                ConvBlock::silu(ch, c_box, 3, 1)?,
                ConvBlock::silu(c_box, c_box, 3, 1)?,
                ConvBlock::plain(c_box, 4 * reg_max, 1)?,
            ]);
            cls_branches.push(vec![
                ConvBlock::new(ch, ch, 3, 1, ch, Activation::Silu)?,
                ConvBlock::silu(ch, c_cls, 1, 1)?,
                ConvBlock::new(c_cls, c_cls, 3, 1, c_cls, Activation::Silu)?,
                ConvBlock::silu(c_cls, c_cls, 1, 1)?,
                ConvBlock::plain(c_cls, num_classes, 1)?,
            ]);
        }
        Ok(DetectHead {
            num_classes,
            reg_max,
            box_branches,
            cls_branches,
        })
    }

    pub fn out_channels(&self) -> usize {
        4 * self.reg_max + self.num_classes
    }

    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Vec<Tensor>> {
        if inputs.len() != self.box_branches.len() {
            return Err(Error::Shape(format!(
                "detect head expects {} inputs, got {}",
                self.box_branches.len(),
                inputs.len()
            )));
        }
        inputs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let b = chain(&self.box_branches[i], x)?;
                let c = chain(&self.cls_branches[i], x)?;
                concat_channels(&[&b, &c])
            })
            .collect()
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (i, br) in self.box_branches.iter().enumerate() {
            for (j, b) in br.iter().enumerate() {
                b.visit_params(&join(prefix, &format!("box.{i}.{j}")), f);
            }
        }
        for (i, br) in self.cls_branches.iter().enumerate() {
            for (j, b) in br.iter().enumerate() {
                b.visit_params(&join(prefix, &format!("cls.{i}.{j}")), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        for (i, br) in self.box_branches.iter_mut().enumerate() {
            for (j, b) in br.iter_mut().enumerate() {
                b.visit_params_mut(&join(prefix, &format!("box.{i}.{j}")), f);
            }
        }
        for (i, br) in self.cls_branches.iter_mut().enumerate() {
            for (j, b) in br.iter_mut().enumerate() {
                b.visit_params_mut(&join(prefix, &format!("cls.{i}.{j}")), f);
            }
        }
    }

    fn flops(&self, inputs: &[Dims]) -> Result<(Vec<Dims>, u64)> {
        let mut total = 0;
        let mut outs = Vec::new();
        for (i, &d) in inputs.iter().enumerate() {
            let (db, fb) = chain_flops(&self.box_branches[i], d)?;
            let (dc, fc) = chain_flops(&self.cls_branches[i], d)?;
            total += fb + fc;
            outs.push([d[0], db[1] + dc[1], d[2], d[3]]);
        }
        Ok((outs, total))
    }
}

fn chain(blocks: &[ConvBlock], x: &Tensor) -> Result<Tensor> {
    let mut y = blocks[0].forward(x)?;
    for b in &blocks[1..] {
        y = b.forward(&y)?;
    }
    Ok(y)
}

fn chain_flops(blocks: &[ConvBlock], mut d: Dims) -> Result<(Dims, u64)> {
    let mut total = 0;
    for b in blocks {
        let (nd, f) = b.flops(d)?;
        d = nd;
        total += f;
    }
    Ok((d, total))
}

/// Materialised layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Conv(ConvBlock),
    C3k2(C3k2),
    Sppf(Sppf),
    C2psa(C2psa),
    Upsample,
    Concat,
    Detect(DetectHead),
}

impl Block {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        match self {
            Block::Conv(b) => b.visit_params(prefix, f),
            Block::C3k2(b) => b.visit_params(prefix, f),
            Block::Sppf(b) => b.visit_params(prefix, f),
            Block::C2psa(b) => b.visit_params(prefix, f),
            Block::Detect(h) => h.visit(prefix, f),
            Block::Upsample | Block::Concat => {}
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        match self {
            Block::Conv(b) => b.visit_params_mut(prefix, f),
            Block::C3k2(b) => b.visit_params_mut(prefix, f),
            Block::Sppf(b) => b.visit_params_mut(prefix, f),
            Block::C2psa(b) => b.visit_params_mut(prefix, f),
            Block::Detect(h) => h.visit_mut(prefix, f),
            Block::Upsample | Block::Concat => {}
        }
    }

    fn single(&self) -> Option<&dyn Module> {
        match self {
            Block::Conv(b) => Some(b),
            Block::C3k2(b) => Some(b),
            Block::Sppf(b) => Some(b),
            Block::C2psa(b) => Some(b),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub block: Block,
}

impl Layer {
    pub fn num_params(&self) -> usize {
        let mut total = 0;
        self.block.visit("", &mut |_, role, _, d| {
            if role.is_learnable() {
                total += d.len();
            }
        });
        total
    }
}

/// Per-layer accounting row.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSummary {
    pub index: usize,
    pub kind: &'static str,
    pub from: Vec<usize>,
    pub outputs: Vec<Dims>,
    pub params: usize,
    pub flops: u64,
}

/// The assembled network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
    /// `saved[i]` is true when a later layer references layer `i` other than
    /// as its immediate predecessor.
    pub saved: Vec<bool>,
}

impl ModelGraph {
    /// Builds the graph for `variant` with `num_classes` outputs and
    /// identity-initialised parameters.
    pub fn build(variant: &str, num_classes: usize) -> Result<Self> {
        Self::from_config(ModelConfig::new(variant, num_classes)?)
    }

    pub fn from_config(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let v = &config.variant;
        let mut layers: Vec<Layer> = Vec::new();
        let mut channels: Vec<usize> = Vec::new();
        for (index, (from_rel, base)) in base_layers().into_iter().enumerate() {
            // Layer 0 reads the image, recorded as an empty source list.
            let from: Vec<usize> = from_rel
                .iter()
                .filter_map(|&f| match f {
                    f if f >= 0 => Some(f as usize),
                    f => index.checked_sub(f.unsigned_abs()),
                })
                .collect();
            let c_in = if index == 0 { 3 } else { channels[from[0]] };
            let (kind, block, c_out) = match base {
                LayerKind::Conv { c_out, kernel, stride } => {
                    let c_out = v.channels(c_out);
                    let b = ConvBlock::silu(c_in, c_out, kernel, stride)?;
                    (LayerKind::Conv { c_out, kernel, stride }, Block::Conv(b), c_out)
                }
                LayerKind::C3k2 { c_out, n, c3k, e } => {
                    let (c_out, n, c3k) = (v.channels(c_out), v.depth(n), c3k || v.force_c3k);
                    let b = C3k2::new(c_in, c_out, n, c3k, e, true)?;
                    (LayerKind::C3k2 { c_out, n, c3k, e }, Block::C3k2(b), c_out)
                }
                LayerKind::Sppf { c_out, pool_kernel } => {
                    let c_out = v.channels(c_out);
                    let b = Sppf::new(c_in, c_out, pool_kernel)?;
                    (LayerKind::Sppf { c_out, pool_kernel }, Block::Sppf(b), c_out)
                }
                LayerKind::C2psa { c_out, n } => {
                    let (c_out, n) = (v.channels(c_out), v.depth(n));
                    let b = C2psa::new(c_in, c_out, n, 0.5)?;
                    (LayerKind::C2psa { c_out, n }, Block::C2psa(b), c_out)
                }
                LayerKind::Upsample => (LayerKind::Upsample, Block::Upsample, c_in),
                LayerKind::Concat => {
                    let c: usize = from.iter().map(|&i| channels[i]).sum();
                    (LayerKind::Concat, Block::Concat, c)
                }
                LayerKind::Detect { .. } => {
                    let ins: Vec<usize> = from.iter().map(|&i| channels[i]).collect();
                    let head = DetectHead::new(config.num_classes, config.reg_max, &ins)?;
                    let c = head.out_channels();
                    let kind = LayerKind::Detect {
                        num_classes: config.num_classes,
                        reg_max: config.reg_max,
                    };
                    (kind, Block::Detect(head), c)
                }
            };
            channels.push(c_out);
            layers.push(Layer {
                spec: LayerSpec { index, from, kind },
                block,
            });
        }
        let mut saved = vec![false; layers.len()];
        for l in &layers {
            for &f in &l.spec.from {
                if f + 1 != l.spec.index || l.spec.from.len() > 1 {
                    saved[f] = true;
                }
            }
        }
        let mut g = ModelGraph { config, layers, saved };
        let eps = g.config.bn_epsilon;
        g.visit_blocks_mut(|b| b.set_epsilon(eps));
        Ok(g)
    }

    fn visit_blocks_mut(&mut self, mut f: impl FnMut(&mut ConvBlock)) {
        for l in &mut self.layers {
            match &mut l.block {
                Block::Conv(b) => f(b),
                Block::C3k2(b) => {
                    f(&mut b.cv1);
                    f(&mut b.cv2);
                    for u in &mut b.units {
                        match u {
                            CspUnit::Bottleneck(bt) => {
                                f(&mut bt.cv1);
                                f(&mut bt.cv2);
                            }
                            CspUnit::C3k(c) => {
                                f(&mut c.cv1);
                                f(&mut c.cv2);
                                f(&mut c.cv3);
                                for bt in &mut c.units {
                                    f(&mut bt.cv1);
                                    f(&mut bt.cv2);
                                }
                            }
                        }
                    }
                }
                Block::Sppf(b) => {
                    f(&mut b.cv1);
                    f(&mut b.cv2);
                }
                Block::C2psa(b) => {
                    f(&mut b.cv1);
                    f(&mut b.cv2);
                    for p in &mut b.blocks {
                        f(&mut p.attn.qkv);
                        f(&mut p.attn.proj);
                        f(&mut p.attn.pe);
                        f(&mut p.ffn1);
                        f(&mut p.ffn2);
                    }
                }
                Block::Detect(h) => {
                    for b in h.box_branches.iter_mut().chain(h.cls_branches.iter_mut()).flatten() {
                        f(b);
                    }
                }
                Block::Upsample | Block::Concat => {}
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn reg_max(&self) -> usize {
        self.config.reg_max
    }

    pub fn strides(&self) -> [usize; 3] {
        STRIDES
    }

    pub fn head(&self) -> &DetectHead {
        match &self.layers.last().expect("graph has layers").block {
            Block::Detect(h) => h,
            _ => unreachable!("last layer is the detect head"),
        }
    }

    /// Runs the network on an `N×3×H×W` image batch (H, W multiples of 32)
    /// and returns the raw head maps at strides 8, 16 and 32.
    pub fn forward(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let [_, c, h, w] = image.dims();
        if c != 3 {
            return Err(Error::ChannelMismatch { expected: 3, got: c });
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape(format!(
                "input size {h}×{w} must be a positive multiple of 32"
            )));
        }
        let mut store: Vec<Option<Tensor>> = vec![None; self.layers.len()];
        let mut prev = image.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let fetch = |j: usize, prev: &Tensor| -> Tensor {
                if j + 1 == i {
                    prev.clone()
                } else {
                    store[j].clone().expect("saved output present")
                }
            };
            let out = match &layer.block {
                Block::Detect(head) => {
                    let ins: Vec<Tensor> = layer.spec.from.iter().map(|&j| fetch(j, &prev)).collect();
                    let refs: Vec<&Tensor> = ins.iter().collect();
                    return head.forward(&refs);
                }
                Block::Concat => {
                    let ins: Vec<Tensor> = layer.spec.from.iter().map(|&j| fetch(j, &prev)).collect();
                    let refs: Vec<&Tensor> = ins.iter().collect();
                    concat_channels(&refs)?
                }
                Block::Upsample => upsample_nearest2x(&prev),
                other => other.single().expect("single-input block").forward(&prev)?,
            };
            if self.saved[i] {
                store[i] = Some(out.clone());
            }
            prev = out;
        }
        Err(Error::InvalidSpec("graph has no detect head".into()))
    }

    /// Visits every parameter under `layer{index}.{path}.{role}` names.
    pub fn visit_params(&self, f: &mut ParamVisitor<'_>) {
        for l in &self.layers {
            l.block.visit(&format!("layer{}", l.spec.index), f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_>) {
        for l in &mut self.layers {
            let prefix = format!("layer{}", l.spec.index);
            l.block.visit_mut(&prefix, f);
        }
    }

    /// Learnable parameters: conv weights and biases, bn gamma and beta.
    pub fn count_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// Per-layer output shapes, params and FLOPs for a square input.
    pub fn summary(&self, input_size: usize) -> Result<Vec<LayerSummary>> {
        if input_size == 0 || input_size % 32 != 0 {
            return Err(Error::Shape(format!(
                "input size {input_size} must be a positive multiple of 32"
            )));
        }
        let mut dims: Vec<Dims> = Vec::with_capacity(self.layers.len());
        let mut rows = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = |j: usize| if i == 0 { [1, 3, input_size, input_size] } else { dims[j] };
            let first = input(if i == 0 { 0 } else { layer.spec.from[0] });
            let (outputs, flops) = match &layer.block {
                Block::Upsample => (vec![[first[0], first[1], 2 * first[2], 2 * first[3]]], 0),
                Block::Concat => {
                    let c = layer.spec.from.iter().map(|&j| dims[j][1]).sum();
                    (vec![[first[0], c, first[2], first[3]]], 0)
                }
                Block::Detect(h) => {
                    let ins: Vec<Dims> = layer.spec.from.iter().map(|&j| dims[j]).collect();
                    h.flops(&ins)?
                }
                other => {
                    let (d, f) = other.single().expect("single-input block").flops(first)?;
                    (vec![d], f)
                }
            };
            dims.push(outputs[0]);
            rows.push(LayerSummary {
                index: layer.spec.index,
                kind: layer.spec.kind.name(),
                from: layer.spec.from.clone(),
                outputs,
                params: layer.num_params(),
                flops,
            });
        }
        Ok(rows)
    }

    /// Floating-point operations of one forward pass, in billions.
    pub fn count_flops(&self, input_size: usize) -> Result<f64> {
        let total: u64 = self.summary(input_size)?.iter().map(|r| r.flops).sum();
        Ok(total as f64 / 1e9)
    }

    /// Seeded initialisation: conv weights uniform in ±sqrt(6 / fan_in),
    /// biases 0, gamma 1, beta 0, running mean 0, running var 1.
    pub fn randomize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.visit_params_mut(&mut |_, role, dims, data| match role {
            ParamRole::Weight => {
                let fan_in: usize = dims[1..].iter().product();
                let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
                for v in data.iter_mut() {
                    *v = rng.gen_range(-bound..bound);
                }
            }
            ParamRole::Bias | ParamRole::Beta | ParamRole::Mean => data.fill(0.0),
            ParamRole::Gamma | ParamRole::Var => data.fill(1.0),
        });
    }

    pub fn init_random(mut self, seed: u64) -> Self {
        self.randomize(seed);
        self
    }

    /// Every parameter as a named weight entry, in canonical order.
    pub fn export_weights(&self) -> Vec<WeightEntry> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, _, dims, data| {
            out.push(WeightEntry {
                name: name.to_string(),
                dims: dims.to_vec(),
                data: data.to_vec(),
            });
        });
        out
    }

    /// Populates all parameters from `entries`. Every parameter must be
    /// present with matching dims, and no extra entries are allowed.
    pub fn load_weights(&mut self, entries: &[WeightEntry]) -> Result<()> {
        let by_name: HashMap<&str, &WeightEntry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
        if by_name.len() != entries.len() {
            return Err(Error::Weights("duplicate entry names".into()));
        }
        // Validate before mutating so a failed load leaves the graph untouched.
        let mut used = HashSet::new();
        let mut err = None;
        self.visit_params(&mut |name, _, dims, _| {
            if err.is_some() {
                return;
            }
            match by_name.get(name) {
                None => err = Some(Error::Weights(format!("missing entry '{name}'"))),
                Some(e) if e.dims != dims => {
                    err = Some(Error::Weights(format!(
                        "entry '{name}' has dims {:?}, expected {:?}",
                        e.dims, dims
                    )))
                }
                Some(e) if e.data.len() != dims.iter().product::<usize>() => {
                    err = Some(Error::Weights(format!("entry '{name}' payload length mismatch")))
                }
                Some(_) => {
                    used.insert(name.to_string());
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = entries.iter().find(|e| !used.contains(&e.name)) {
            return Err(Error::Weights(format!("unexpected entry '{}'", extra.name)));
        }
        self.visit_params_mut(&mut |name, _, _, data| {
            data.copy_from_slice(&by_name[name].data);
        });
        Ok(())
    }
}

impl fmt::Display for LayerSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let from: Vec<String> = self.from.iter().map(|v| v.to_string()).collect();
        let shapes: Vec<String> = self
            .outputs
            .iter()
            .map(|d| format!("{}x{}x{}x{}", d[0], d[1], d[2], d[3]))
            .collect();
        write!(
            f,
            "{:>3}  {:<8}  {:<10}  {:<36}  {:>10}  {:>8.3}",
            self.index,
            self.kind,
            from.join(","),
            shapes.join(" "),
            self.params,
            self.flops as f64 / 1e9
        )
    }
}
