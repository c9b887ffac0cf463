//! The segmentation model: backbone features, optional polyformer, 1×1 head.

use polyformer_tensor::{Graph, Real, Tensor, Var};

use crate::config::{AdaptFlags, BnAdapt, KScope, Phase};
use crate::error::{Error, Result};
use crate::layer::{Domain, PolyOutput, PolyformerConfig, PolyformerLayer};
use crate::nn::{BnMode, ForwardCtx, Module, Param, ParamKind, ParamSet};
use crate::unet::{SegHead, UNet, UNetConfig};

#[derive(Clone, Debug)]
pub struct SegModel<T> {
    pub backbone: UNet<T>,
    pub head: SegHead<T>,
    pub polyformer: Option<PolyformerLayer<T>>,
}

/// Handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Backbone features `f`.
    pub features: Var,
    /// Features fed to the head: `f̃` with a polyformer, `f` without.
    pub adapted: Var,
    pub logits: Var,
    pub poly: Option<PolyOutput>,
}

impl<T: Real> SegModel<T> {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        Ok(SegModel {
            backbone: UNet::new(cfg, seed)?,
            head: SegHead::new(cfg.feature_dim(), cfg.num_classes, seed),
            polyformer: None,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        self.backbone.config()
    }

    /// Inserts a fresh polyformer between feature extractor and head.
    pub fn insert_polyformer(&mut self, cfg: PolyformerConfig, seed: u64) -> Result<()> {
        if self.polyformer.is_some() {
            return Err(Error::Lifecycle("model already has a polyformer".into()));
        }
        if cfg.dim != self.config().feature_dim() {
            return Err(Error::Config(format!(
                "polyformer dim {} does not match feature width {}",
                cfg.dim,
                self.config().feature_dim()
            )));
        }
        self.polyformer = Some(PolyformerLayer::new(cfg, seed)?);
        Ok(())
    }

    pub fn polyformer_mut(&mut self) -> Result<&mut PolyformerLayer<T>> {
        self.polyformer
            .as_mut()
            .ok_or_else(|| Error::Lifecycle("model has no polyformer".into()))
    }

    pub fn set_backbone_bn_mode(&mut self, mode: BnMode) {
        self.backbone.set_bn_mode(mode);
    }

    /// Feature extractor: `[B, in, H, W]` → `[B, D, H, W]`.
    pub fn extract_features(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Var> {
        self.backbone.forward(g, x, ctx)
    }

    /// Task head: `[B, D, H, W]` → logits `[B, classes, H, W]`.
    pub fn segment(&self, g: &mut Graph<T>, f: Var) -> Result<Var> {
        self.head.forward(g, f)
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        domain: Domain,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<ModelOutput> {
        let features = self.extract_features(g, x, ctx)?;
        self.forward_from_features(g, features, domain)
    }

    /// Polyformer (if any) and head applied to precomputed features.
    pub fn forward_from_features(
        &self,
        g: &mut Graph<T>,
        features: Var,
        domain: Domain,
    ) -> Result<ModelOutput> {
        let (adapted, poly) = match &self.polyformer {
            Some(layer) => {
                let out = layer.forward(g, features, domain)?;
                (out.features, Some(out))
            }
            None => (features, None),
        };
        let logits = self.segment(g, adapted)?;
        Ok(ModelOutput {
            features,
            adapted,
            logits,
            poly,
        })
    }

    /// Logits for a batch of images with BatchNorms in eval mode, leaving
    /// `self` untouched.
    pub fn predict_logits(&self, images: &Tensor<T>, domain: Domain) -> Result<Tensor<T>> {
        let mut model = self.clone();
        model.set_backbone_bn_mode(BnMode::Eval);
        let mut g = Graph::inference();
        let x = g.input(images.clone(), false);
        let out = model.forward(&mut g, x, domain, &mut ForwardCtx::discarding())?;
        Ok(g.value(out.logits).clone())
    }
}

impl<T: Real> Module<T> for SegModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.backbone.visit(f);
        if let Some(p) = &self.polyformer {
            p.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.backbone.visit_mut(f);
        if let Some(p) = &mut self.polyformer {
            p.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

fn is_backbone(name: &str) -> bool {
    name.starts_with("backbone.") || name.starts_with("head.")
}

/// Parameters that receive gradient in `phase`.
///
/// * A: every backbone and head parameter.
/// * B: every polyformer parameter except the target keys.
/// * C: the target keys (or every polyformer parameter except the source
///   keys under [`KScope::AllWeights`]), plus backbone BatchNorm affine
///   parameters under [`BnAdapt::Full`].
///
/// Running statistics never appear; whether they move is decided by the
/// BatchNorm mode, not by trainability.
pub fn trainable_params<T: Real>(
    model: &SegModel<T>,
    phase: Phase,
    flags: &AdaptFlags,
) -> Result<ParamSet> {
    let mut set = ParamSet::new();
    match phase {
        Phase::A => model.visit(&mut |p| {
            if is_backbone(&p.name) && p.kind != ParamKind::RunningStat {
                set.insert(p.name.clone());
            }
        }),
        Phase::B => {
            let layer = model
                .polyformer
                .as_ref()
                .ok_or_else(|| Error::Lifecycle("phase B needs a polyformer".into()))?;
            let target: ParamSet = layer.key_names(Domain::Target).into_iter().collect();
            layer.visit(&mut |p| {
                if !target.contains(&p.name) {
                    set.insert(p.name.clone());
                }
            });
        }
        Phase::C => {
            flags.row()?;
            let layer = model
                .polyformer
                .as_ref()
                .ok_or_else(|| Error::Lifecycle("phase C needs a polyformer".into()))?;
            match flags.k_scope {
                KScope::KOnly => layer
                    .key_names(Domain::Target)
                    .into_iter()
                    .for_each(|n| set.insert(n)),
                KScope::AllWeights => {
                    let source: ParamSet = layer.key_names(Domain::Source).into_iter().collect();
                    layer.visit(&mut |p| {
                        if !source.contains(&p.name) {
                            set.insert(p.name.clone());
                        }
                    });
                }
            }
            if flags.bn_mode == BnAdapt::Full {
                model.backbone.visit(&mut |p| {
                    if p.kind == ParamKind::NormAffine {
                        set.insert(p.name.clone());
                    }
                });
            }
        }
    }
    Ok(set)
}
