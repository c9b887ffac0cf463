//! Few-shot domain adaptation for segmentation with a polymorphic transformer
//! layer.
//!
//! A U-Net is trained on a source domain ([`Phase::A`]); a
//! [`PolyformerLayer`] is inserted between its feature extractor and head and
//! trained with everything else frozen ([`Phase::B`]); finally only the
//! layer's target-domain key projections and the backbone BatchNorms adapt
//! to a handful of labelled target images ([`Phase::C`]).

pub mod ablation;
pub mod adversarial;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod layer;
pub mod loss;
pub mod metrics;
mod model;
pub mod nn;
pub mod optim;
pub mod train;
pub mod unet;

pub use config::{AblationRow, AdaptFlags, AdvMode, BnAdapt, KScope, Phase, PhaseConfig};
pub use error::{Error, Result};
pub use layer::{Domain, LayerStage, PolyformerConfig, PolyformerLayer};
pub use model::{trainable_params, ModelOutput, SegModel};
pub use unet::UNetConfig;

pub use polyformer_tensor as tensor;
