//! Layers with named parameters, plus the bookkeeping that lets whole models
//! be snapshotted, frozen selectively, and restored.

mod check;
pub mod init;
mod layers;
mod param;

pub use check::module_grad_check;
pub use layers::{
    BatchNorm2d, BnMode, Conv2d, ConvBnRelu, FeedForward, GradientReversal, LayerNorm, Linear,
    BN_EPS, BN_MOMENTUM, LN_EPS,
};
pub use param::{changed_params, ForwardCtx, Module, Param, ParamKind, ParamSet, Snapshot};
