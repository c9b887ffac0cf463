//! Domain discriminator behind a gradient reversal layer.

use polyformer_tensor::{Graph, Real, TensorError, Var};

use crate::config::AdvMode;
use crate::error::{Error, Result};
use crate::model::ModelOutput;
use crate::nn::{BatchNorm2d, BnMode, Conv2d, ForwardCtx, GradientReversal, Module, Param};

const WIDTHS: [usize; 4] = [16, 32, 64, 64];

#[derive(Clone, Debug)]
struct Stage<T> {
    conv: Conv2d<T>,
    bn: Option<BatchNorm2d<T>>,
}

/// Five 3×3 convolutions (16→32→64→64→1, stride 2 except the last), global
/// average pooling, one logit per image. Parameters are named `disc.s{i}.*`.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub grl: GradientReversal,
    in_channels: usize,
    stages: Vec<Stage<T>>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(in_channels: usize, lambda: f64, seed: u64) -> Result<Self> {
        let mut stages = Vec::with_capacity(5);
        let mut cin = in_channels;
        for (i, &w) in WIDTHS.iter().enumerate() {
            let prefix = format!("disc.s{i}");
            let with_bn = i > 0;
            stages.push(Stage {
                conv: Conv2d::new(&format!("{prefix}.conv"), cin, w, 3, 2, !with_bn, seed),
                bn: with_bn.then(|| BatchNorm2d::new(&format!("{prefix}.bn"), w)),
            });
            cin = w;
        }
        stages.push(Stage {
            conv: Conv2d::new("disc.s4.conv", cin, 1, 3, 1, true, seed),
            bn: None,
        });
        Ok(Discriminator {
            grl: GradientReversal::new(lambda)?,
            in_channels,
            stages,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        for s in &mut self.stages {
            if let Some(bn) = &mut s.bn {
                bn.mode = mode;
            }
        }
    }

    /// `[B, C, H, W]` → logits `[B]`. With `bypass_grl` the reversal layer
    /// is skipped, which only changes the backward pass.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ctx: &mut ForwardCtx<T>,
        bypass_grl: bool,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(
                TensorError::shape("discriminator", &shape, &[0, self.in_channels, 0, 0]).into(),
            );
        }
        let mut h = if bypass_grl {
            x
        } else {
            self.grl.forward(g, x)?
        };
        let last = self.stages.len() - 1;
        for (i, s) in self.stages.iter().enumerate() {
            h = s.conv.forward(g, h)?;
            if let Some(bn) = &s.bn {
                h = bn.forward(g, h, ctx)?;
            }
            if i < last {
                h = g.relu(h);
            }
        }
        // Global average pooling of the single output channel.
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[s[0], s[2] * s[3]])?;
        let sum = g.sum_axis(flat, 1)?;
        Ok(g.scale(sum, T::lit(1.0 / (s[2] * s[3]) as f64)))
    }
}

impl<T: Real> Module<T> for Discriminator<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for s in &self.stages {
            s.conv.visit(f);
            if let Some(bn) = &s.bn {
                bn.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for s in &mut self.stages {
            s.conv.visit_mut(f);
            if let Some(bn) = &mut s.bn {
                bn.visit_mut(f);
            }
        }
    }
}

/// Channel count the discriminator sees in `mode`.
pub fn adv_channels(mode: AdvMode, feature_dim: usize, num_classes: usize) -> usize {
    match mode {
        AdvMode::Features => feature_dim,
        AdvMode::Masks => num_classes,
    }
}

/// Discriminator input for one forward pass: adapted features, or the
/// per-pixel class probabilities.
pub fn adv_input<T: Real>(g: &mut Graph<T>, out: &ModelOutput, mode: AdvMode) -> Result<Var> {
    match mode {
        AdvMode::Features => Ok(out.adapted),
        AdvMode::Masks => Ok(g.softmax(out.logits, 1)?),
    }
}

/// Binary cross-entropy of the discriminator over both domains, labels
/// source = 0 and target = 1, averaged over all images.
pub fn adv_loss<T: Real>(
    g: &mut Graph<T>,
    disc: &Discriminator<T>,
    source: Option<Var>,
    target: Option<Var>,
    ctx: &mut ForwardCtx<T>,
    bypass_grl: bool,
) -> Result<Var> {
    let (Some(s), Some(t)) = (source, target) else {
        return Err(Error::Contract(
            "adversarial loss needs both a source and a target batch".into(),
        ));
    };
    let (bs, bt) = (g.shape(s)[0], g.shape(t)[0]);
    let x = g.concat(&[s, t], 0)?;
    let logits = disc.forward(g, x, ctx, bypass_grl)?;
    let labels: Vec<T> = (0..bs + bt)
        .map(|i| if i < bs { T::zero() } else { T::one() })
        .collect();
    Ok(g.bce_with_logits(logits, &labels)?)
}
