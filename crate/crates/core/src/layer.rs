//! The polymorphic transformer layer.
//!
//! Tokens `f` (`N×D`, one per pixel) are squeezed onto `M` learned prototypes
//! by Transformer 1, then Transformer 2 expands the updated prototypes back
//! onto the tokens, added to `f` as a residual:
//!
//! ```text
//! C̃ = T1(f, C)      A1 = softmax_N((f·K)(C·Q)ᵀ)     N×M, columns sum to 1
//! f̃ = f + T2(C̃, f)  A2 = softmax_M((f·Q)(C̃·K)ᵀ)     N×M, rows sum to 1
//! ```
//!
//! Transformer 1 holds two key projection sets: `k_source`, used on source
//! images, and `k_target`, an adaptable copy used on target images.

use polyformer_tensor::{Graph, Real, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init, FeedForward, LayerNorm, Module, Param, ParamKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolyformerConfig {
    /// Token width `D`; must match the backbone feature width.
    pub dim: usize,
    /// Prototype count `M`.
    pub prototypes: usize,
    /// Attention modes `N_m` per sub-transformer.
    pub modes: usize,
    pub ffn_hidden: usize,
}

impl Default for PolyformerConfig {
    fn default() -> Self {
        PolyformerConfig {
            dim: 8,
            prototypes: 16,
            modes: 2,
            ffn_hidden: 32,
        }
    }
}

impl PolyformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.prototypes == 0 || self.modes == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config(format!(
                "polyformer sizes must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Where the layer is in its training lifecycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerStage {
    /// Inserted, source training not finished.
    Fresh,
    /// Source training finished; target keys not yet initialised.
    SourceTrained,
    /// `k_target` initialised from `k_source`; target-domain forwards allowed.
    TargetReady,
}

impl LayerStage {
    pub fn code(self) -> u8 {
        match self {
            LayerStage::Fresh => 0,
            LayerStage::SourceTrained => 1,
            LayerStage::TargetReady => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LayerStage::Fresh),
            1 => Some(LayerStage::SourceTrained),
            2 => Some(LayerStage::TargetReady),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
struct ModeProj<T> {
    q: Param<T>,
    k: Param<T>,
    v: Param<T>,
}

/// Multi-mode attention block followed by output projection, layer norms,
/// and a feed-forward network.
#[derive(Clone, Debug)]
pub struct SubTransformer<T> {
    modes: Vec<ModeProj<T>>,
    gate: Param<T>,
    out: Param<T>,
    norm1: LayerNorm<T>,
    ffn: FeedForward<T>,
    norm2: LayerNorm<T>,
}

impl<T: Real> SubTransformer<T> {
    fn new(
        prefix: &str,
        key_name: &str,
        cfg: &PolyformerConfig,
        zero_out: bool,
        seed: u64,
    ) -> Self {
        let d = cfg.dim;
        let std = 1.0 / (d as f64).sqrt();
        let proj = |name: String| {
            let value = init::normal(seed, &name, &[d, d], std);
            Param::new(name, value, ParamKind::Weight)
        };
        let modes = (0..cfg.modes)
            .map(|m| ModeProj {
                q: proj(format!("{prefix}.mode{m}.q")),
                k: proj(format!("{prefix}.mode{m}.{key_name}")),
                v: proj(format!("{prefix}.mode{m}.v")),
            })
            .collect();
        let out_name = format!("{prefix}.out");
        let out = if zero_out {
            Param::new(out_name, Tensor::zeros([d, d]), ParamKind::Weight)
        } else {
            proj(out_name)
        };
        SubTransformer {
            modes,
            gate: Param::new(
                format!("{prefix}.gate"),
                Tensor::zeros([cfg.modes]),
                ParamKind::Gate,
            ),
            out,
            norm1: LayerNorm::new(&format!("{prefix}.norm1"), d),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), d, cfg.ffn_hidden, seed),
            norm2: LayerNorm::new(&format!("{prefix}.norm2"), d),
        }
    }

    fn gate_mix(&self, g: &mut Graph<T>, per_mode: &[Var]) -> Result<Var> {
        let gate = self.gate.leaf(g);
        let w = g.softmax(gate, 0)?;
        Ok(g.weighted_sum(per_mode, w)?)
    }

    /// `y = LN2(x1 + FFN(x1))` with `x1 = LN1(x)`.
    fn norm_ffn(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let x1 = self.norm1.forward(g, x)?;
        let h = self.ffn.forward(g, x1)?;
        let y = g.add(x1, h)?;
        self.norm2.forward(g, y)
    }
}

impl<T: Real> Module<T> for SubTransformer<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for m in &self.modes {
            f(&m.q);
            f(&m.k);
            f(&m.v);
        }
        f(&self.gate);
        f(&self.out);
        self.norm1.visit(f);
        self.ffn.visit(f);
        self.norm2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for m in &mut self.modes {
            f(&mut m.q);
            f(&mut m.k);
            f(&mut m.v);
        }
        f(&mut self.gate);
        f(&mut self.out);
        self.norm1.visit_mut(f);
        self.ffn.visit_mut(f);
        self.norm2.visit_mut(f);
    }
}

/// Transformer 1 intermediates for one batch.
#[derive(Clone, Debug)]
pub struct SqueezeOut {
    /// Updated prototypes `C̃`, `[B, M, D]`.
    pub prototypes: Var,
    /// Per-mode attention `[B, N, M]`, normalised over `N`.
    pub attention: Vec<Var>,
    /// Per-mode `Aᵀ·(f·V)` before gating, `[B, M, D]`.
    pub fused: Vec<Var>,
}

/// Transformer 2 intermediates for one batch.
#[derive(Clone, Debug)]
pub struct ExpandOut {
    /// `f̃ = f + T2(C̃, f)`, `[B, N, D]`.
    pub tokens: Var,
    /// Per-mode attention `[B, N, M]`, normalised over `M`.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct PolyOutput {
    /// Same shape as the input feature map.
    pub features: Var,
    pub squeeze: SqueezeOut,
    pub expand: ExpandOut,
}

#[derive(Clone, Debug)]
pub struct PolyformerLayer<T> {
    cfg: PolyformerConfig,
    stage: LayerStage,
    prototypes: Param<T>,
    t1: SubTransformer<T>,
    k_target: Vec<Param<T>>,
    t2: SubTransformer<T>,
}

impl<T: Real> PolyformerLayer<T> {
    /// Fresh layer with Transformer 2's output projection zeroed, so it
    /// starts as the identity map on features.
    pub fn new(cfg: PolyformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let name = "polyformer.prototypes";
        let prototypes = Param::new(
            name,
            init::normal(
                seed,
                name,
                &[cfg.prototypes, cfg.dim],
                1.0 / (cfg.dim as f64).sqrt(),
            ),
            ParamKind::Prototype,
        );
        let t1 = SubTransformer::new("polyformer.t1", "k_source", &cfg, false, seed);
        let k_target = t1
            .modes
            .iter()
            .enumerate()
            .map(|(m, p)| {
                Param::new(
                    format!("polyformer.t1.mode{m}.k_target"),
                    p.k.value.clone(),
                    ParamKind::Weight,
                )
            })
            .collect();
        let t2 = SubTransformer::new("polyformer.t2", "k", &cfg, true, seed);
        Ok(PolyformerLayer {
            cfg,
            stage: LayerStage::Fresh,
            prototypes,
            t1,
            k_target,
            t2,
        })
    }

    pub fn config(&self) -> &PolyformerConfig {
        &self.cfg
    }

    pub fn stage(&self) -> LayerStage {
        self.stage
    }

    pub(crate) fn set_stage(&mut self, stage: LayerStage) {
        self.stage = stage;
    }

    pub fn mark_source_trained(&mut self) {
        self.stage = LayerStage::SourceTrained;
    }

    /// Copies `k_source` into `k_target` for every mode of Transformer 1.
    pub fn init_target_keys(&mut self) -> Result<()> {
        if self.stage == LayerStage::Fresh {
            return Err(Error::Lifecycle(
                "target keys can only be initialised after source polyformer training".into(),
            ));
        }
        for (kt, mode) in self.k_target.iter_mut().zip(&self.t1.modes) {
            kt.value = mode.k.value.clone();
        }
        self.stage = LayerStage::TargetReady;
        Ok(())
    }

    /// Names of the Transformer 1 key projections for `domain`.
    pub fn key_names(&self, domain: Domain) -> Vec<String> {
        match domain {
            Domain::Source => self.t1.modes.iter().map(|m| m.k.name.clone()).collect(),
            Domain::Target => self.k_target.iter().map(|k| k.name.clone()).collect(),
        }
    }

    pub fn prototype_values(&self) -> &Tensor<T> {
        &self.prototypes.value
    }

    fn check_tokens(&self, g: &Graph<T>, x: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[2] != self.cfg.dim {
            let shape = shape.to_vec();
            return Err(TensorError::shape(op, &shape, &[0, 0, self.cfg.dim]).into());
        }
        if shape[1] == 0 {
            return Err(TensorError::Empty { op }.into());
        }
        Ok((shape[0], shape[1]))
    }

    /// Transformer 1 on tokens `[B, N, D]`.
    pub fn squeeze(&self, g: &mut Graph<T>, tokens: Var, domain: Domain) -> Result<SqueezeOut> {
        self.check_tokens(g, tokens, "squeeze")?;
        if domain == Domain::Target && self.stage != LayerStage::TargetReady {
            return Err(Error::Lifecycle(
                "target-domain forward before target keys were initialised".into(),
            ));
        }
        let c = self.prototypes.leaf(g);
        let mut attention = Vec::with_capacity(self.cfg.modes);
        let mut fused = Vec::with_capacity(self.cfg.modes);
        for (m, proj) in self.t1.modes.iter().enumerate() {
            let k = match domain {
                Domain::Source => proj.k.leaf(g),
                Domain::Target => self.k_target[m].leaf(g),
            };
            let q = proj.q.leaf(g);
            let v = proj.v.leaf(g);
            let fk = g.matmul(tokens, k)?;
            let cq = g.matmul(c, q)?;
            let scores = g.matmul_ex(fk, cq, false, true)?;
            let a = g.softmax(scores, 1)?;
            let fv = g.matmul(tokens, v)?;
            fused.push(g.matmul_ex(a, fv, true, false)?);
            attention.push(a);
        }
        let mix = self.t1.gate_mix(g, &fused)?;
        let wo = self.t1.out.leaf(g);
        let o = g.matmul(mix, wo)?;
        let r = g.add_trailing(o, c)?;
        let prototypes = self.t1.norm_ffn(g, r)?;
        Ok(SqueezeOut {
            prototypes,
            attention,
            fused,
        })
    }

    /// Transformer 2: `f̃ = f + T2(C̃, f)` for `C̃` `[B, M, D]` and tokens `[B, N, D]`.
    pub fn expand(&self, g: &mut Graph<T>, prototypes: Var, tokens: Var) -> Result<ExpandOut> {
        let (b, _) = self.check_tokens(g, tokens, "expand")?;
        let (cb, _) = self.check_tokens(g, prototypes, "expand")?;
        if cb != b {
            let (ps, ts) = (g.shape(prototypes).to_vec(), g.shape(tokens).to_vec());
            return Err(TensorError::shape("expand", &ps, &ts).into());
        }
        let mut attention = Vec::with_capacity(self.cfg.modes);
        let mut mixed = Vec::with_capacity(self.cfg.modes);
        for proj in &self.t2.modes {
            let q = proj.q.leaf(g);
            let k = proj.k.leaf(g);
            let v = proj.v.leaf(g);
            let fq = g.matmul(tokens, q)?;
            let ck = g.matmul(prototypes, k)?;
            let scores = g.matmul_ex(fq, ck, false, true)?;
            let a = g.softmax(scores, 2)?;
            let cv = g.matmul(prototypes, v)?;
            mixed.push(g.matmul(a, cv)?);
            attention.push(a);
        }
        let mix = self.t2.gate_mix(g, &mixed)?;
        let z = self.t2.norm_ffn(g, mix)?;
        let wo = self.t2.out.leaf(g);
        let o = g.matmul(z, wo)?;
        let tokens = g.add(tokens, o)?;
        Ok(ExpandOut { tokens, attention })
    }

    /// Feature map `[B, D, H, W]` → same shape, via `H·W` tokens per image.
    pub fn forward(&self, g: &mut Graph<T>, fmap: Var, domain: Domain) -> Result<PolyOutput> {
        let shape = g.shape(fmap).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.dim {
            return Err(TensorError::shape("polyformer", &shape, &[0, self.cfg.dim, 0, 0]).into());
        }
        let (b, d, n) = (shape[0], shape[1], shape[2] * shape[3]);
        let flat = g.reshape(fmap, &[b, d, n])?;
        let tokens = g.permute(flat, &[0, 2, 1])?;
        let squeeze = self.squeeze(g, tokens, domain)?;
        let expand = self.expand(g, squeeze.prototypes, tokens)?;
        let back = g.permute(expand.tokens, &[0, 2, 1])?;
        let features = g.reshape(back, &shape)?;
        Ok(PolyOutput {
            features,
            squeeze,
            expand,
        })
    }
}

impl<T: Real> Module<T> for PolyformerLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.prototypes);
        self.t1.visit(f);
        self.k_target.iter().for_each(&mut *f);
        self.t2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.prototypes);
        self.t1.visit_mut(f);
        self.k_target.iter_mut().for_each(&mut *f);
        self.t2.visit_mut(f);
    }
}
