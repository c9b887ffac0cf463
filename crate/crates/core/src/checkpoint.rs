//! Binary checkpoint format.
//!
//! ```text
//! "PFRM" | u32 version | metadata | u32 entry count | entries
//! entry = u8 section | u32 name length | name | u8 dtype | u8 rank | u32 dims… | f32 values…
//! ```
//!
//! All integers and floats are little-endian. Section 0 holds model
//! parameters (everything needed for inference); section 1 holds training
//! state (optimizer moments, discriminator). Encoding is canonical, so
//! save → load → save reproduces the same bytes.

use std::path::Path;

use polyformer_tensor::Tensor;

use crate::adversarial::Discriminator;
use crate::config::Phase;
use crate::error::{Error, Result};
use crate::layer::{LayerStage, PolyformerConfig};
use crate::model::SegModel;
use crate::nn::Module;
use crate::unet::UNetConfig;

pub const MAGIC: &[u8; 4] = b"PFRM";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const SECTION_MODEL: u8 = 0;
const SECTION_TRAIN: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub phase: Phase,
    /// Optimizer steps taken in `phase`.
    pub step: u64,
    pub config_digest: [u8; 32],
    /// Root seed of the per-step batch streams.
    pub rng_seed: u64,
    /// Batches drawn so far.
    pub rng_counter: u64,
    pub adam_steps: u64,
    pub unet: UNetConfig,
    pub polyformer: Option<(PolyformerConfig, LayerStage)>,
    /// Discriminator input channels when one is stored.
    pub disc_in: Option<usize>,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Vec<(String, Tensor<f32>)>,
    pub train: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Rebuilds the model architecture recorded in the metadata and loads
    /// its parameters.
    pub fn build_model(&self) -> Result<SegModel<f32>> {
        let mut model = SegModel::new(self.meta.unet, 0)?;
        if let Some((cfg, stage)) = self.meta.polyformer {
            model.insert_polyformer(cfg, 0)?;
            model.polyformer_mut()?.set_stage(stage);
        }
        model.load_state(&self.model)?;
        Ok(model)
    }

    /// The stored discriminator, if any.
    pub fn build_discriminator(&self) -> Result<Option<Discriminator<f32>>> {
        let Some(cin) = self.meta.disc_in else {
            return Ok(None);
        };
        let mut disc = Discriminator::new(cin, self.meta.lambda, 0)?;
        let own: Vec<(String, Tensor<f32>)> = self
            .train
            .iter()
            .filter(|(n, _)| n.starts_with("disc."))
            .cloned()
            .collect();
        disc.load_state(&own)?;
        Ok(Some(disc))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let m = &self.meta;
        w.u8(m.phase.code());
        w.u64(m.step);
        w.0.extend_from_slice(&m.config_digest);
        w.u64(m.rng_seed);
        w.u64(m.rng_counter);
        w.u64(m.adam_steps);
        for v in [
            m.unet.depth,
            m.unet.base_channels,
            m.unet.in_channels,
            m.unet.num_classes,
        ] {
            w.u32(v as u32);
        }
        match &m.polyformer {
            None => w.u8(0),
            Some((p, stage)) => {
                w.u8(1);
                for v in [p.dim, p.prototypes, p.modes, p.ffn_hidden] {
                    w.u32(v as u32);
                }
                w.u8(stage.code());
            }
        }
        match m.disc_in {
            None => w.u8(0),
            Some(c) => {
                w.u8(1);
                w.u32(c as u32);
            }
        }
        w.0.extend_from_slice(&m.lambda.to_le_bytes());
        w.u32((self.model.len() + self.train.len()) as u32);
        for (section, entries) in [(SECTION_MODEL, &self.model), (SECTION_TRAIN, &self.train)] {
            for (name, t) in entries {
                w.u8(section);
                w.u32(name.len() as u32);
                w.0.extend_from_slice(name.as_bytes());
                w.u8(DTYPE_F32);
                w.u8(t.rank() as u8);
                for &d in t.shape() {
                    w.u32(d as u32);
                }
                for v in t.data() {
                    w.0.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                4,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let at = r.pos;
        let phase =
            Phase::from_code(r.u8()?).ok_or_else(|| Error::format(at, "unknown phase code"))?;
        let step = r.u64()?;
        let config_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let rng_seed = r.u64()?;
        let rng_counter = r.u64()?;
        let adam_steps = r.u64()?;
        let unet = UNetConfig {
            depth: r.u32()? as usize,
            base_channels: r.u32()? as usize,
            in_channels: r.u32()? as usize,
            num_classes: r.u32()? as usize,
        };
        let polyformer = match r.flag()? {
            false => None,
            true => {
                let cfg = PolyformerConfig {
                    dim: r.u32()? as usize,
                    prototypes: r.u32()? as usize,
                    modes: r.u32()? as usize,
                    ffn_hidden: r.u32()? as usize,
                };
                let at = r.pos;
                let stage = LayerStage::from_code(r.u8()?)
                    .ok_or_else(|| Error::format(at, "unknown layer stage"))?;
                Some((cfg, stage))
            }
        };
        let disc_in = match r.flag()? {
            false => None,
            true => Some(r.u32()? as usize),
        };
        let lambda = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let count = r.u32()?;
        let (mut model, mut train) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let at = r.pos;
            let section = r.u8()?;
            let len = r.u32()? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(name_at, "parameter name is not UTF-8"))?
                .to_owned();
            let dtype_at = r.pos;
            if r.u8()? != DTYPE_F32 {
                return Err(Error::format(
                    dtype_at,
                    format!("unsupported dtype for {name}"),
                ));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= bytes.len() / 4)
                .ok_or_else(|| {
                    Error::format(dtype_at, format!("implausible shape {shape:?} for {name}"))
                })?;
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)?;
            match section {
                SECTION_MODEL => model.push((name, t)),
                SECTION_TRAIN => train.push((name, t)),
                _ => return Err(Error::format(at, format!("unknown section {section}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after last entry"));
        }
        Ok(Checkpoint {
            meta: CheckpointMeta {
                phase,
                step,
                config_digest,
                rng_seed,
                rng_counter,
                adam_steps,
                unet,
                polyformer,
                disc_in,
                lambda,
            },
            model,
            train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::format(
                self.bytes.len(),
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            )),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::format(at, format!("expected 0 or 1, found {v}"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
