//! The three training phases and their shared step loop.
//!
//! Every batch is drawn from a stream keyed by `(seed, step)`, so a run
//! resumed from a checkpoint draws exactly the batches the uninterrupted run
//! would have drawn.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use polyformer_tensor::rng::RngKey;
use polyformer_tensor::{Graph, Tensor, TensorError, Var};
use rand::seq::index;
use serde::Serialize;

use crate::adversarial::{adv_channels, adv_input, adv_loss, Discriminator};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{AdaptFlags, BnAdapt, Phase, PhaseConfig};
use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::layer::{Domain, LayerStage};
use crate::loss::composite_loss;
use crate::model::{trainable_params, SegModel};
use crate::nn::{changed_params, BnMode, ForwardCtx, Module, ParamKind, ParamSet, Snapshot};
use crate::optim::{AdamW, AdamWConfig};

/// Parameter gradients of one step, by name.
pub type Gradients = BTreeMap<String, Tensor<f32>>;

/// Images a phase trains on.
#[derive(Clone, Copy, Debug)]
pub struct PhaseData<'a> {
    pub source: &'a [Sample],
    /// Labelled target shots; only used in Phase C.
    pub target: &'a [Sample],
}

/// One line of the per-step metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: u64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ce: Option<f64>,
    /// Soft dice of the supervised batch, `1 − dice loss`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adv: Option<f64>,
}

pub struct Trainer {
    pub cfg: PhaseConfig,
    pub model: SegModel<f32>,
    pub disc: Option<Discriminator<f32>>,
    opt: AdamW<f32>,
    step: u64,
    trainable: ParamSet,
    start: Snapshot<f32>,
    /// Phase B only: frozen eval-mode backbone features per sample id.
    features: HashMap<String, Tensor<f32>>,
}

fn adam_cfg(cfg: &PhaseConfig) -> AdamWConfig {
    AdamWConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
    }
}

fn init_seed(cfg: &PhaseConfig, what: &str) -> u64 {
    RngKey::new(cfg.seed).child_str(what).value()
}

fn expect_phase(ckpt: &Checkpoint, phase: Phase, what: &str) -> Result<()> {
    if ckpt.meta.phase != phase {
        return Err(Error::Lifecycle(format!(
            "{what} needs a phase {phase} checkpoint, got phase {}",
            ckpt.meta.phase
        )));
    }
    Ok(())
}

impl Trainer {
    fn assemble(
        cfg: PhaseConfig,
        mut model: SegModel<f32>,
        disc: Option<Discriminator<f32>>,
    ) -> Result<Self> {
        let trainable = trainable_params(&model, cfg.phase, &cfg.flags)?;
        model.set_trainable(&trainable);
        let bn = match (cfg.phase, cfg.flags.bn_mode) {
            (Phase::A, _) | (Phase::C, BnAdapt::Full) => BnMode::Train,
            (Phase::B, _) => BnMode::Eval,
            (Phase::C, BnAdapt::StatsOnly) => BnMode::StatsOnly,
        };
        model.set_backbone_bn_mode(bn);
        let start = model.snapshot();
        Ok(Trainer {
            opt: AdamW::new(adam_cfg(&cfg)),
            cfg,
            model,
            disc,
            step: 0,
            trainable,
            start,
            features: HashMap::new(),
        })
    }

    /// Fresh backbone for source training.
    pub fn phase_a(cfg: PhaseConfig) -> Result<Self> {
        Self::check_cfg(&cfg, Phase::A)?;
        let model = SegModel::new(cfg.unet, init_seed(&cfg, "init-backbone"))?;
        Self::assemble(cfg, model, None)
    }

    /// Inserts a fresh polyformer into a trained backbone.
    pub fn phase_b(backbone: &Checkpoint, cfg: PhaseConfig) -> Result<Self> {
        Self::check_cfg(&cfg, Phase::B)?;
        expect_phase(backbone, Phase::A, "polyformer training")?;
        let mut model = backbone.build_model()?;
        if model.config() != &cfg.unet {
            return Err(Error::Config(
                "backbone checkpoint architecture differs from config".into(),
            ));
        }
        model.insert_polyformer(cfg.polyformer, init_seed(&cfg, "init-polyformer"))?;
        Self::assemble(cfg, model, None)
    }

    /// Copies the source keys into the target keys and prepares adaptation.
    pub fn phase_c(poly: &Checkpoint, cfg: PhaseConfig) -> Result<Self> {
        Self::check_cfg(&cfg, Phase::C)?;
        expect_phase(poly, Phase::B, "adaptation")?;
        let mut model = poly.build_model()?;
        model.polyformer_mut()?.init_target_keys()?;
        let disc = if cfg.flags.use_adv {
            let cin = adv_channels(
                cfg.flags.adv_mode,
                cfg.unet.feature_dim(),
                cfg.unet.num_classes,
            );
            Some(Discriminator::new(
                cin,
                cfg.flags.lambda,
                init_seed(&cfg, "init-discriminator"),
            )?)
        } else {
            None
        };
        Self::assemble(cfg, model, disc)
    }

    /// Continues a run from one of its own checkpoints.
    pub fn resume(ckpt: &Checkpoint, cfg: PhaseConfig) -> Result<Self> {
        cfg.validate()?;
        expect_phase(ckpt, cfg.phase, "resuming")?;
        if ckpt.meta.config_digest != cfg.digest() {
            return Err(Error::Config(
                "checkpoint was written under a different config".into(),
            ));
        }
        let model = ckpt.build_model()?;
        let disc = ckpt.build_discriminator()?;
        if disc.is_some() != (cfg.phase == Phase::C && cfg.flags.use_adv) {
            return Err(Error::StateMismatch(
                "discriminator presence does not match config".into(),
            ));
        }
        let mut t = Self::assemble(cfg, model, disc)?;
        t.opt.load_state(ckpt.meta.adam_steps, &ckpt.train)?;
        t.step = ckpt.meta.step;
        Ok(t)
    }

    fn check_cfg(cfg: &PhaseConfig, phase: Phase) -> Result<()> {
        if cfg.phase != phase {
            return Err(Error::Config(format!(
                "config is for phase {}, not {phase}",
                cfg.phase
            )));
        }
        cfg.validate()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn trainable(&self) -> &ParamSet {
        &self.trainable
    }

    /// Parameters allowed to change in this phase: the trainable set plus
    /// BatchNorm statistics of layers that update them.
    pub fn allowed_changes(&self) -> ParamSet {
        let mut allowed = self.trainable.clone();
        if self.cfg.phase != Phase::B {
            self.model.visit(&mut |p| {
                if p.kind == ParamKind::RunningStat && p.name.starts_with("backbone.") {
                    allowed.insert(p.name.clone());
                }
            });
        }
        allowed
    }

    /// Names changed since this trainer was created.
    pub fn changed(&self) -> BTreeSet<String> {
        changed_params(&self.start, &self.model.snapshot())
    }

    /// Fails if anything outside [`allowed_changes`](Self::allowed_changes)
    /// moved.
    pub fn verify_ledger(&self) -> Result<()> {
        let allowed = self.allowed_changes();
        let names: Vec<String> = self
            .changed()
            .into_iter()
            .filter(|n| !allowed.contains(n))
            .collect();
        if names.is_empty() {
            Ok(())
        } else {
            Err(Error::Ledger {
                phase: self.cfg.phase.to_string(),
                names,
            })
        }
    }

    fn draw<'a>(&self, pool: &'a [Sample], label: &str, size: usize) -> Result<Vec<&'a Sample>> {
        if pool.is_empty() {
            return Err(Error::Contract(format!("no {label} images to train on")));
        }
        let size = size.min(pool.len());
        let mut rng = RngKey::new(self.cfg.seed)
            .child_str(label)
            .child(self.step)
            .rng();
        Ok(index::sample(&mut rng, pool.len(), size)
            .into_iter()
            .map(|i| &pool[i])
            .collect())
    }

    /// One optimizer step.
    pub fn step(&mut self, data: PhaseData<'_>) -> Result<StepRecord> {
        let (record, grads, ctx) = self.objective(data)?;
        self.opt.begin_step();
        self.opt.apply(&mut self.model, &grads)?;
        ctx.apply(&mut self.model);
        if let Some(d) = &mut self.disc {
            self.opt.apply(d, &grads)?;
            ctx.apply(d);
        }
        self.step += 1;
        Ok(record)
    }

    /// The loss record and parameter gradients the next step would use,
    /// without changing any parameter.
    pub fn gradients(&mut self, data: PhaseData<'_>) -> Result<(StepRecord, Gradients)> {
        let (record, grads, _) = self.objective(data)?;
        Ok((record, grads))
    }

    /// A non-finite value anywhere in the forward or backward pass aborts the
    /// step as a non-finite loss.
    fn objective(
        &mut self,
        data: PhaseData<'_>,
    ) -> Result<(StepRecord, Gradients, ForwardCtx<f32>)> {
        self.objective_inner(data).map_err(|e| match e {
            Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss {
                phase: self.cfg.phase.to_string(),
                step: self.step + 1,
            },
            e => e,
        })
    }

    fn objective_inner(
        &mut self,
        data: PhaseData<'_>,
    ) -> Result<(StepRecord, Gradients, ForwardCtx<f32>)> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::recording();
        let bs = self.cfg.batch_size;
        let (loss, parts, adv) = match self.cfg.phase {
            Phase::B => {
                let batch = self.draw(data.source, "source-batch", bs)?;
                let f = self.frozen_features(&batch)?;
                let (_, t) = data::batch::<f32>(&batch)?;
                let f = g.input(f, false);
                let out = self
                    .model
                    .forward_from_features(&mut g, f, Domain::Source)?;
                let l = composite_loss(&mut g, out.logits, &t)?;
                (l.total, Some(l), None)
            }
            Phase::A => {
                let batch = self.draw(data.source, "source-batch", bs)?;
                let (x, t) = data::batch::<f32>(&batch)?;
                let x = g.input(x, false);
                let out = self.model.forward(&mut g, x, Domain::Source, &mut ctx)?;
                let l = composite_loss(&mut g, out.logits, &t)?;
                (l.total, Some(l), None)
            }
            Phase::C => self.adapt_objective(&mut g, &mut ctx, data)?,
        };
        let loss_value = g.value(loss).item()? as f64;
        let value = |g: &Graph<f32>, v: Var| g.value(v).item().map(|x| x as f64);
        let record = StepRecord {
            phase: self.cfg.phase,
            step: self.step + 1,
            loss: loss_value,
            ce: parts.map(|p| value(&g, p.ce)).transpose()?,
            dice: parts
                .map(|p| value(&g, p.dice).map(|d| 1.0 - d))
                .transpose()?,
            adv: adv.map(|a| value(&g, a)).transpose()?,
        };
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                phase: self.cfg.phase.to_string(),
                step: self.step + 1,
            });
        }
        g.backward(loss)?;
        Ok((record, g.param_grads(), ctx))
    }

    /// Backbone features `[B, D, H, W]` for `batch`. The backbone is frozen
    /// and in eval mode during Phase B, where every op acts on each image
    /// independently, so cached features equal recomputed ones bitwise.
    fn frozen_features(&mut self, batch: &[&Sample]) -> Result<Tensor<f32>> {
        let mut data = Vec::new();
        let mut shape = Vec::new();
        for s in batch {
            if !self.features.contains_key(&s.id) {
                let (x, _) = data::batch::<f32>(&[*s])?;
                let mut g = Graph::inference();
                let x = g.input(x, false);
                let f = self
                    .model
                    .extract_features(&mut g, x, &mut ForwardCtx::discarding())?;
                self.features.insert(s.id.clone(), g.value(f).clone());
            }
            let f = &self.features[&s.id];
            shape = f.shape()[1..].to_vec();
            data.extend_from_slice(f.data());
        }
        let mut full = vec![batch.len()];
        full.extend(shape);
        Ok(Tensor::new(full, data)?)
    }

    /// `L_sup` on target shots plus, when enabled, the adversarial loss on a
    /// source/target pair of batches.
    fn adapt_objective(
        &self,
        g: &mut Graph<f32>,
        ctx: &mut ForwardCtx<f32>,
        data: PhaseData<'_>,
    ) -> Result<(Var, Option<crate::loss::LossParts>, Option<Var>)> {
        let flags: AdaptFlags = self.cfg.flags;
        let shots = self.draw(data.target, "target-batch", self.cfg.batch_size)?;
        let (xt, tt) = data::batch::<f32>(&shots)?;
        let xt = g.input(xt, false);
        let out_t = self.model.forward(g, xt, Domain::Target, ctx)?;
        let sup = if flags.use_sup {
            Some(composite_loss(g, out_t.logits, &tt)?)
        } else {
            None
        };
        let adv = if flags.use_adv {
            let disc = self
                .disc
                .as_ref()
                .ok_or_else(|| Error::Lifecycle("missing discriminator".into()))?;
            let src = self.draw(data.source, "source-batch", self.cfg.batch_size)?;
            let (xs, _) = data::batch::<f32>(&src)?;
            let xs = g.input(xs, false);
            // Source images normalise with their own batch statistics but do
            // not move the running statistics, which track the target domain.
            let out_s = self
                .model
                .forward(g, xs, Domain::Source, &mut ForwardCtx::discarding())?;
            let a_s = adv_input(g, &out_s, flags.adv_mode)?;
            let a_t = adv_input(g, &out_t, flags.adv_mode)?;
            Some(adv_loss(g, disc, Some(a_s), Some(a_t), ctx, false)?)
        } else {
            None
        };
        let total = match (sup, adv) {
            (Some(s), Some(a)) => g.add(s.total, a)?,
            (Some(s), None) => s.total,
            (None, Some(a)) => a,
            (None, None) => unreachable!("validated flags always select a loss"),
        };
        Ok((total, sup, adv))
    }

    /// Runs up to the configured step count, then checks the freeze ledger.
    pub fn run(&mut self, data: PhaseData<'_>, mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
        self.run_until(self.cfg.steps(), data, &mut on_step)
    }

    /// Runs until `target` steps have been taken in total. Reaching the
    /// configured step count completes the phase.
    pub fn run_until(
        &mut self,
        target: u64,
        data: PhaseData<'_>,
        on_step: &mut dyn FnMut(&StepRecord),
    ) -> Result<()> {
        while self.step < target {
            let rec = self.step(data)?;
            on_step(&rec);
        }
        self.verify_ledger()?;
        if self.step >= self.cfg.steps() && self.cfg.phase == Phase::B {
            let layer = self.model.polyformer_mut()?;
            if layer.stage() == LayerStage::Fresh {
                layer.mark_source_trained();
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut train = self.opt.state();
        if let Some(d) = &self.disc {
            train.extend(d.state());
        }
        Checkpoint {
            meta: CheckpointMeta {
                phase: self.cfg.phase,
                step: self.step,
                config_digest: self.cfg.digest(),
                rng_seed: self.cfg.seed,
                rng_counter: self.step,
                adam_steps: self.opt.steps(),
                unet: *self.model.config(),
                polyformer: self
                    .model
                    .polyformer
                    .as_ref()
                    .map(|p| (*p.config(), p.stage())),
                disc_in: self.disc.as_ref().map(|d| d.in_channels()),
                lambda: self
                    .disc
                    .as_ref()
                    .map_or(self.cfg.flags.lambda, |d| d.grl.lambda),
            },
            model: self.model.state(),
            train,
        }
    }
}

/// Phase A: trains a backbone on source images.
pub fn train_phase_a(
    source: &[Sample],
    cfg: PhaseConfig,
    on_step: impl FnMut(&StepRecord),
) -> Result<Checkpoint> {
    let mut t = Trainer::phase_a(cfg)?;
    t.run(
        PhaseData {
            source,
            target: &[],
        },
        on_step,
    )?;
    Ok(t.checkpoint())
}

/// Phase B: trains an inserted polyformer on source images, backbone frozen.
pub fn train_phase_b(
    backbone: &Checkpoint,
    source: &[Sample],
    cfg: PhaseConfig,
    on_step: impl FnMut(&StepRecord),
) -> Result<Checkpoint> {
    let mut t = Trainer::phase_b(backbone, cfg)?;
    t.run(
        PhaseData {
            source,
            target: &[],
        },
        on_step,
    )?;
    Ok(t.checkpoint())
}

/// Phase C: adapts to labelled target shots.
pub fn adapt_phase_c(
    poly: &Checkpoint,
    shots: &[Sample],
    source: &[Sample],
    cfg: PhaseConfig,
    on_step: impl FnMut(&StepRecord),
) -> Result<Checkpoint> {
    let mut t = Trainer::phase_c(poly, cfg)?;
    t.run(
        PhaseData {
            source,
            target: shots,
        },
        on_step,
    )?;
    Ok(t.checkpoint())
}
