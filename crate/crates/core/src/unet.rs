//! U-Net split into a feature extractor (encoder–decoder at full resolution)
//! and a 1×1 task head.

use polyformer_tensor::{Graph, Real, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BnMode, Conv2d, ConvBnRelu, ForwardCtx, Module, Param};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 2,
            base_channels: 8,
            in_channels: 3,
            num_classes: 3,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("unet depth must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Channel width `D` of the feature map handed to the head.
    pub fn feature_dim(&self) -> usize {
        self.base_channels
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Debug)]
pub struct DoubleConv<T> {
    pub c1: ConvBnRelu<T>,
    pub c2: ConvBnRelu<T>,
}

impl<T: Real> DoubleConv<T> {
    fn new(prefix: &str, cin: usize, cout: usize, seed: u64) -> Self {
        DoubleConv {
            c1: ConvBnRelu::new(&format!("{prefix}.c1"), cin, cout, 1, seed),
            c2: ConvBnRelu::new(&format!("{prefix}.c2"), cout, cout, 1, seed),
        }
    }

    fn forward(&self, g: &mut Graph<T>, x: Var, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        let y = self.c1.forward(g, x, ctx)?;
        self.c2.forward(g, y, ctx)
    }
}

impl<T: Real> Module<T> for DoubleConv<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.c1.visit(f);
        self.c2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.c1.visit_mut(f);
        self.c2.visit_mut(f);
    }
}

/// Encoder–decoder feature extractor. Parameters are named
/// `backbone.enc{level}.*` and `backbone.dec{level}.*`.
#[derive(Clone, Debug)]
pub struct UNet<T> {
    cfg: UNetConfig,
    enc: Vec<DoubleConv<T>>,
    dec: Vec<DoubleConv<T>>,
}

impl<T: Real> UNet<T> {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let enc = (0..=cfg.depth)
            .map(|l| {
                let cin = if l == 0 {
                    cfg.in_channels
                } else {
                    cfg.width(l - 1)
                };
                DoubleConv::new(&format!("backbone.enc{l}"), cin, cfg.width(l), seed)
            })
            .collect();
        let dec = (0..cfg.depth)
            .map(|l| {
                DoubleConv::new(
                    &format!("backbone.dec{l}"),
                    cfg.width(l + 1) + cfg.width(l),
                    cfg.width(l),
                    seed,
                )
            })
            .collect();
        Ok(UNet { cfg, enc, dec })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        for block in self.enc.iter_mut().chain(self.dec.iter_mut()) {
            block.c1.bn.mode = mode;
            block.c2.bn.mode = mode;
        }
    }

    /// `[B, in, H, W]` → `[B, D, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(
                TensorError::shape("unet input", &shape, &[0, self.cfg.in_channels, 0, 0]).into(),
            );
        }
        let m = 1usize << self.cfg.depth;
        if !shape[2].is_multiple_of(m) || !shape[3].is_multiple_of(m) {
            return Err(TensorError::invalid(
                "unet input",
                format!(
                    "spatial size {}x{} not divisible by {m}",
                    shape[2], shape[3]
                ),
            )
            .into());
        }
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = self.enc[0].forward(g, x, ctx)?;
        for block in &self.enc[1..] {
            skips.push(h);
            let down = g.max_pool2(h)?;
            h = block.forward(g, down, ctx)?;
        }
        for (block, skip) in self.dec.iter().zip(skips).rev() {
            let up = g.upsample2x(h)?;
            let cat = g.concat(&[up, skip], 1)?;
            h = block.forward(g, cat, ctx)?;
        }
        Ok(h)
    }
}

impl<T: Real> Module<T> for UNet<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.enc.iter().chain(&self.dec).for_each(|b| b.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.enc
            .iter_mut()
            .chain(&mut self.dec)
            .for_each(|b| b.visit_mut(f));
    }
}

/// The 1×1 convolution mapping features to class logits, named `head.conv.*`.
#[derive(Clone, Debug)]
pub struct SegHead<T> {
    pub conv: Conv2d<T>,
}

impl<T: Real> SegHead<T> {
    pub fn new(dim: usize, num_classes: usize, seed: u64) -> Self {
        SegHead {
            conv: Conv2d::new("head.conv", dim, num_classes, 1, 1, true, seed),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, f: Var) -> Result<Var> {
        let shape = g.shape(f);
        if shape.len() != 4 || shape[1] != self.conv.in_channels() {
            let shape = shape.to_vec();
            return Err(
                TensorError::shape("segment", &shape, &[0, self.conv.in_channels(), 0, 0]).into(),
            );
        }
        self.conv.forward(g, f)
    }
}

impl<T: Real> Module<T> for SegHead<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
    }
}
