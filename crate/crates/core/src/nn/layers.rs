use polyformer_tensor::{Graph, Real, Tensor, TensorError, Var};

use super::init;
use super::param::{ForwardCtx, Module, Param, ParamKind};
use crate::error::Result;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    /// Square `k×k` convolution with "same" padding for odd `k`.
    pub fn new(
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        seed: u64,
    ) -> Self {
        let wname = format!("{prefix}.weight");
        let weight = init::kaiming(seed, &wname, &[cout, cin, k, k], cin * k * k);
        Conv2d {
            weight: Param::new(wname, weight, ParamKind::Weight),
            bias: bias.then(|| {
                Param::new(
                    format!("{prefix}.bias"),
                    Tensor::zeros([cout]),
                    ParamKind::Bias,
                )
            }),
            stride,
            pad: k / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = self.weight.leaf(g);
        let b = self.bias.as_ref().map(|b| b.leaf(g));
        Ok(g.conv2d(x, w, b, self.stride, self.pad)?)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// How a [`BatchNorm2d`] treats its statistics and affine parameters.
///
/// | mode        | running stats updated | affine receives gradient |
/// |-------------|-----------------------|--------------------------|
/// | `Train`     | yes                   | if trainable             |
/// | `Eval`      | no                    | no                       |
/// | `StatsOnly` | yes                   | no                       |
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
    StatsOnly,
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: BnMode,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(
                format!("{prefix}.gamma"),
                Tensor::ones([channels]),
                ParamKind::NormAffine,
            ),
            beta: Param::new(
                format!("{prefix}.beta"),
                Tensor::zeros([channels]),
                ParamKind::NormAffine,
            ),
            running_mean: Param::new(
                format!("{prefix}.running_mean"),
                Tensor::zeros([channels]),
                ParamKind::RunningStat,
            ),
            running_var: Param::new(
                format!("{prefix}.running_var"),
                Tensor::ones([channels]),
                ParamKind::RunningStat,
            ),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        let (gamma, beta) = match self.mode {
            BnMode::Train => (self.gamma.leaf(g), self.beta.leaf(g)),
            BnMode::Eval | BnMode::StatsOnly => {
                (self.gamma.frozen_leaf(g), self.beta.frozen_leaf(g))
            }
        };
        let eps = T::lit(self.eps);
        if self.mode == BnMode::Eval {
            let running = Some((
                self.running_mean.value.data(),
                self.running_var.value.data(),
            ));
            let (y, _) = g.batch_norm(x, gamma, beta, running, eps)?;
            return Ok(y);
        }
        let (y, stats) = g.batch_norm(x, gamma, beta, None, eps)?;
        let stats = stats.expect("batch statistics in train mode");
        let m = T::lit(self.momentum);
        let keep = T::one() - m;
        let blend = |old: &Tensor<T>, new: &[T]| {
            Tensor::from_fn(old.shape().to_vec(), |i| keep * old.data()[i] + m * new[i])
        };
        ctx.push(
            &self.running_mean.name,
            blend(&self.running_mean.value, &stats.mean),
        );
        ctx.push(
            &self.running_var.name,
            blend(&self.running_var.value, &stats.var_unbiased),
        );
        Ok(y)
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Convolution (no bias) → BatchNorm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Real> ConvBnRelu<T> {
    pub fn new(prefix: &str, cin: usize, cout: usize, stride: usize, seed: u64) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(&format!("{prefix}.conv"), cin, cout, 3, stride, false, seed),
            bn: BatchNorm2d::new(&format!("{prefix}.bn"), cout),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y, ctx)?;
        Ok(g.relu(y))
    }
}

impl<T: Real> Module<T> for ConvBnRelu<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

/// `y = x·W + b` over the last axis; `W` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(prefix: &str, din: usize, dout: usize, seed: u64) -> Self {
        let wname = format!("{prefix}.weight");
        Linear {
            weight: Param::new(
                wname.clone(),
                init::normal(seed, &wname, &[din, dout], 1.0 / (din as f64).sqrt()),
                ParamKind::Weight,
            ),
            bias: Param::new(
                format!("{prefix}.bias"),
                Tensor::zeros([dout]),
                ParamKind::Bias,
            ),
        }
    }

    pub fn zeroed(prefix: &str, din: usize, dout: usize) -> Self {
        Linear {
            weight: Param::new(
                format!("{prefix}.weight"),
                Tensor::zeros([din, dout]),
                ParamKind::Weight,
            ),
            bias: Param::new(
                format!("{prefix}.bias"),
                Tensor::zeros([dout]),
                ParamKind::Bias,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let din = self.weight.value.shape()[0];
        if shape.last() != Some(&din) {
            return Err(TensorError::shape("linear", &shape, self.weight.value.shape()).into());
        }
        let rows = shape.iter().product::<usize>() / din;
        let flat = g.reshape(x, &[rows, din])?;
        let w = self.weight.leaf(g);
        let b = self.bias.leaf(g);
        let y = g.matmul(flat, w)?;
        let y = g.add_trailing(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.weight.value.shape()[1];
        Ok(g.reshape(y, &out_shape)?)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(
                format!("{prefix}.gamma"),
                Tensor::ones([dim]),
                ParamKind::NormAffine,
            ),
            beta: Param::new(
                format!("{prefix}.beta"),
                Tensor::zeros([dim]),
                ParamKind::NormAffine,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = self.gamma.leaf(g);
        let beta = self.beta.leaf(g);
        Ok(g.layer_norm(x, gamma, beta, T::lit(LN_EPS))?)
    }
}

impl<T: Real> Module<T> for LayerNorm<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// `D → h → D` with GELU between the two linear maps.
#[derive(Clone, Debug)]
pub struct FeedForward<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Real> FeedForward<T> {
    pub fn new(prefix: &str, dim: usize, hidden: usize, seed: u64) -> Self {
        FeedForward {
            fc1: Linear::new(&format!("{prefix}.fc1"), dim, hidden, seed),
            fc2: Linear::new(&format!("{prefix}.fc2"), hidden, dim, seed),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

impl<T: Real> Module<T> for FeedForward<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// Identity forward, gradient scaled by `-lambda` backward.
#[derive(Clone, Copy, Debug)]
pub struct GradientReversal {
    pub lambda: f64,
}

impl GradientReversal {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(crate::Error::Config(format!(
                "gradient reversal scale must be >= 0, got {lambda}"
            )));
        }
        Ok(GradientReversal { lambda })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        Ok(g.grad_reverse(x, T::lit(self.lambda))?)
    }
}
