//! Run configuration: phases, adaptation flags, and the digest that ties
//! every output back to the exact settings that produced it.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layer::PolyformerConfig;
use crate::unet::UNetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    /// Source-domain backbone training.
    A,
    /// Source-domain polyformer training with the backbone frozen.
    B,
    /// Few-shot target adaptation.
    C,
}

impl Phase {
    pub fn code(self) -> u8 {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        [Phase::A, Phase::B, Phase::C].get(code as usize).copied()
    }

    pub fn default_steps(self) -> u64 {
        match self {
            Phase::A | Phase::B => 300,
            Phase::C => 150,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvMode {
    /// Discriminate adapted feature maps.
    Features,
    /// Discriminate softmax class-probability maps.
    Masks,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KScope {
    /// Only Transformer 1's target keys.
    KOnly,
    /// Every polyformer parameter except the source keys.
    AllWeights,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnAdapt {
    /// Backbone BatchNorm affine parameters train and statistics update.
    Full,
    /// Only the statistics update.
    StatsOnly,
}

/// Phase C objective and parameter scope.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptFlags {
    pub use_sup: bool,
    pub use_adv: bool,
    pub adv_mode: AdvMode,
    pub k_scope: KScope,
    pub bn_mode: BnAdapt,
    /// Gradient reversal scale.
    pub lambda: f64,
}

impl Default for AdaptFlags {
    fn default() -> Self {
        AblationRow::Standard.flags()
    }
}

impl AdaptFlags {
    /// The ablation row these flags select, or a config error for
    /// combinations outside the supported table.
    pub fn row(&self) -> Result<AblationRow> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        AblationRow::ALL
            .into_iter()
            .find(|r| r.matches(self))
            .ok_or_else(|| {
                Error::Config(format!("unsupported adaptation flag combination: {self:?}"))
            })
    }
}

/// The six supported Phase C configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    AdvK,
    SupKNoBn,
    SupK,
    SupAdvAllWeights,
    SupAdvMaskK,
    Standard,
}

impl AblationRow {
    pub const ALL: [AblationRow; 6] = [
        AblationRow::AdvK,
        AblationRow::SupKNoBn,
        AblationRow::SupK,
        AblationRow::SupAdvAllWeights,
        AblationRow::SupAdvMaskK,
        AblationRow::Standard,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationRow::AdvK => "L_adv + K",
            AblationRow::SupKNoBn => "L_sup + K, w/o BN",
            AblationRow::SupK => "L_sup + K",
            AblationRow::SupAdvAllWeights => "L_sup + L_adv + All weights",
            AblationRow::SupAdvMaskK => "L_sup + L_adv(mask) + K",
            AblationRow::Standard => "L_sup + L_adv + K (standard)",
        }
    }

    pub fn flags(self) -> AdaptFlags {
        let (use_sup, use_adv, adv_mode, k_scope, bn_mode) = match self {
            AblationRow::AdvK => (false, true, AdvMode::Features, KScope::KOnly, BnAdapt::Full),
            AblationRow::SupKNoBn => (
                true,
                false,
                AdvMode::Features,
                KScope::KOnly,
                BnAdapt::StatsOnly,
            ),
            AblationRow::SupK => (true, false, AdvMode::Features, KScope::KOnly, BnAdapt::Full),
            AblationRow::SupAdvAllWeights => (
                true,
                true,
                AdvMode::Features,
                KScope::AllWeights,
                BnAdapt::Full,
            ),
            AblationRow::SupAdvMaskK => (true, true, AdvMode::Masks, KScope::KOnly, BnAdapt::Full),
            AblationRow::Standard => (true, true, AdvMode::Features, KScope::KOnly, BnAdapt::Full),
        };
        AdaptFlags {
            use_sup,
            use_adv,
            adv_mode,
            k_scope,
            bn_mode,
            lambda: 1.0,
        }
    }

    fn matches(self, f: &AdaptFlags) -> bool {
        let r = self.flags();
        // Without an adversarial term the mode is irrelevant.
        let adv_ok = r.use_adv == f.use_adv && (!f.use_adv || r.adv_mode == f.adv_mode);
        r.use_sup == f.use_sup && adv_ok && r.k_scope == f.k_scope && r.bn_mode == f.bn_mode
    }
}

/// Settings for one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub seed: u64,
    /// Optimizer steps; the phase default when absent.
    pub steps: Option<u64>,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Annotated target images available in Phase C.
    pub shots: usize,
    pub flags: AdaptFlags,
    pub unet: UNetConfig,
    pub polyformer: PolyformerConfig,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            phase: Phase::A,
            seed: 0,
            steps: None,
            batch_size: 4,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            shots: 5,
            flags: AdaptFlags::default(),
            unet: UNetConfig::default(),
            polyformer: PolyformerConfig::default(),
        }
    }
}

impl PhaseConfig {
    pub fn new(phase: Phase, seed: u64) -> Self {
        PhaseConfig {
            phase,
            seed,
            ..Default::default()
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps.unwrap_or_else(|| self.phase.default_steps())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let positive = [("lr", self.lr), ("eps", self.eps)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        self.unet.validate()?;
        self.polyformer.validate()?;
        if self.polyformer.dim != self.unet.feature_dim() {
            return Err(Error::Config(format!(
                "polyformer dim {} must equal backbone feature width {}",
                self.polyformer.dim,
                self.unet.feature_dim()
            )));
        }
        if self.phase == Phase::C {
            if self.shots == 0 {
                return Err(Error::Config("shots must be at least 1".into()));
            }
            self.flags.row()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(bytes).into()
    }

    pub fn digest_hex(&self) -> String {
        hex(&self.digest())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
