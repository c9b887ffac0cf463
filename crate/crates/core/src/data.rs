//! Synthetic two-domain segmentation benchmark.
//!
//! Every image shows a textured background with an elliptical "disc" and a
//! smaller concentric "cup" (classes 0, 1, 2). Geometry comes from one random
//! stream per (seed, index) and is shared by all domains; a [`DomainSpec`]
//! only changes appearance, so source and target differ by covariate shift
//! alone.

use std::fs;
use std::path::{Path, PathBuf};

use polyformer_tensor::rng::RngKey;
use polyformer_tensor::{Real, Tensor};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::Domain;

pub const IMAGE_SIZE: usize = 64;
pub const NUM_CLASSES: usize = 3;
pub const SOURCE_TRAIN: usize = 200;
pub const SOURCE_EVAL: usize = 48;
pub const TARGET_SIZE: usize = 60;

/// Appearance of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSpec {
    /// Additive offset, in `[-0.5, 0.5]`.
    pub brightness_shift: f64,
    /// Contrast about mid-grey, in `[0.5, 2]`.
    pub contrast_scale: f64,
    /// Per-channel (RGB) additive offsets.
    pub channel_tint: [f64; 3],
    pub noise_std: f64,
    /// Spatial frequency of the background texture, in cycles per image.
    pub texture_freq: f64,
    pub seed_base: u64,
    pub size: usize,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec::source()
    }
}

impl DomainSpec {
    pub fn source() -> Self {
        DomainSpec {
            brightness_shift: 0.0,
            contrast_scale: 1.0,
            channel_tint: [0.0; 3],
            noise_std: 0.0,
            texture_freq: 4.0,
            seed_base: 1,
            size: IMAGE_SIZE,
        }
    }

    /// Darker, flatter, red-tinted, noisy.
    pub fn target() -> Self {
        DomainSpec {
            brightness_shift: -0.25,
            contrast_scale: 0.8,
            channel_tint: [0.1, 0.0, 0.0],
            noise_std: 0.03,
            seed_base: 2,
            ..DomainSpec::source()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-0.5..=0.5).contains(&self.brightness_shift) {
            return Err(Error::Config(format!(
                "brightness_shift {} outside [-0.5, 0.5]",
                self.brightness_shift
            )));
        }
        if !(0.5..=2.0).contains(&self.contrast_scale) {
            return Err(Error::Config(format!(
                "contrast_scale {} outside [0.5, 2]",
                self.contrast_scale
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) || !self.texture_freq.is_finite()
        {
            return Err(Error::Config(
                "noise_std and texture_freq must be finite, noise_std >= 0".into(),
            ));
        }
        if self.channel_tint.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("channel_tint must be finite".into()));
        }
        if self.size < 16 {
            return Err(Error::Config(format!("image size {} too small", self.size)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Row-major class indices, `H·W` entries.
    pub mask: Vec<u8>,
    pub domain: Domain,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

struct Geometry {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    cup: f64,
    phase: [f64; 2],
    tone: f64,
}

impl Geometry {
    fn draw(seed_base: u64, index: u64, size: usize) -> Self {
        let mut rng = RngKey::new(seed_base)
            .child_str("geometry")
            .child(index)
            .rng();
        let s = size as f64;
        Geometry {
            cx: rng.gen_range(0.32 * s..0.68 * s),
            cy: rng.gen_range(0.32 * s..0.68 * s),
            a: rng.gen_range(0.14 * s..0.24 * s),
            b: rng.gen_range(0.14 * s..0.24 * s),
            theta: rng.gen_range(0.0..std::f64::consts::PI),
            cup: rng.gen_range(0.4..0.65),
            phase: [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)],
            tone: rng.gen_range(-0.05..0.05),
        }
    }

    /// Squared elliptical radius of pixel centre `(x, y)`.
    fn radius2(&self, x: usize, y: usize) -> f64 {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let (c, s) = (self.theta.cos(), self.theta.sin());
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

const BACKGROUND: [f64; 3] = [0.55, 0.30, 0.20];
const DISC: [f64; 3] = [0.80, 0.58, 0.42];
const CUP: [f64; 3] = [0.95, 0.85, 0.70];

/// Sample `index` of the domain described by `spec`. Pure in
/// `(spec, index)`.
pub fn generate_sample(spec: &DomainSpec, domain: Domain, index: u64) -> Sample {
    let n = spec.size;
    let geo = Geometry::draw(spec.seed_base, index, n);
    let mut mask = vec![0u8; n * n];
    let mut image = vec![0f32; 3 * n * n];
    let mut noise_rng = RngKey::new(spec.seed_base)
        .child_str("noise")
        .child(index)
        .rng();
    let noise = Normal::new(0.0, spec.noise_std.max(1e-12)).expect("finite std");
    let freq = spec.texture_freq * std::f64::consts::TAU / n as f64;
    for y in 0..n {
        for x in 0..n {
            let r2 = geo.radius2(x, y);
            let class = if r2 <= geo.cup * geo.cup {
                2
            } else if r2 <= 1.0 {
                1
            } else {
                0
            };
            mask[y * n + x] = class;
            let texture = 0.06
                * (freq * x as f64 + geo.phase[0]).sin()
                * (freq * y as f64 + geo.phase[1]).sin();
            let base = match class {
                0 => BACKGROUND,
                1 => DISC,
                _ => CUP,
            };
            for c in 0..3 {
                let clean = base[c] + geo.tone + if class == 0 { texture } else { 0.3 * texture };
                let eps = if spec.noise_std > 0.0 {
                    noise.sample(&mut noise_rng)
                } else {
                    0.0
                };
                let v = (clean - 0.5) * spec.contrast_scale
                    + 0.5
                    + spec.brightness_shift
                    + spec.channel_tint[c]
                    + eps;
                image[(c * n + y) * n + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    let tag = match domain {
        Domain::Source => "src",
        Domain::Target => "tgt",
    };
    Sample {
        id: format!("{tag}-{index:04}"),
        image: Tensor::new([3, n, n], image).expect("image shape"),
        mask,
        domain,
    }
}

pub fn generate(spec: &DomainSpec, domain: Domain, indices: std::ops::Range<u64>) -> Vec<Sample> {
    indices.map(|i| generate_sample(spec, domain, i)).collect()
}

/// The default benchmark: source training and held-out source images, and
/// the target pool the few-shot split draws from.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub source_train: Vec<Sample>,
    pub source_eval: Vec<Sample>,
    pub target: Vec<Sample>,
}

impl Benchmark {
    pub fn new(source: &DomainSpec, target: &DomainSpec) -> Result<Self> {
        source.validate()?;
        target.validate()?;
        let train = SOURCE_TRAIN as u64;
        Ok(Benchmark {
            source_train: generate(source, Domain::Source, 0..train),
            source_eval: generate(source, Domain::Source, train..train + SOURCE_EVAL as u64),
            target: generate(target, Domain::Target, 0..TARGET_SIZE as u64),
        })
    }

    pub fn default_pair() -> Self {
        Self::new(&DomainSpec::source(), &DomainSpec::target()).expect("default specs are valid")
    }
}

/// `k` samples drawn uniformly without replacement (kept in dataset order)
/// and the remaining samples.
pub fn few_shot_split(
    dataset: &[Sample],
    k: usize,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if k == 0 || k >= dataset.len() {
        return Err(Error::Contract(format!(
            "few-shot split needs 1 <= k < {}, got k = {k}",
            dataset.len()
        )));
    }
    let mut rng = RngKey::new(seed).child_str("few-shot").rng();
    let mut chosen = index::sample(&mut rng, dataset.len(), k).into_vec();
    chosen.sort_unstable();
    let mut take = vec![false; dataset.len()];
    chosen.iter().for_each(|&i| take[i] = true);
    let (train, eval): (Vec<_>, Vec<_>) = dataset.iter().cloned().zip(take).partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(s, _)| s).collect(),
        eval.into_iter().map(|(s, _)| s).collect(),
    ))
}

/// Stacks images into `[B, 3, H, W]` and masks into flat targets.
pub fn batch<T: Real>(samples: &[&Sample]) -> Result<(Tensor<T>, Vec<usize>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    let mut targets = Vec::with_capacity(samples.len() * first.mask.len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::Contract(format!(
                "sample {} has shape {:?}, expected {shape:?}",
                s.id,
                s.image.shape()
            )));
        }
        data.extend(s.image.data().iter().map(|&v| T::lit(v as f64)));
        targets.extend(s.mask.iter().map(|&c| c as usize));
    }
    let t = Tensor::new([samples.len(), shape[0], shape[1], shape[2]], data)?;
    Ok((t, targets))
}

// ------------------------------------------------------------------ file I/O

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parsed binary netpbm header: `(width, height, maxval, data offset)`.
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::format(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, "expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start, "number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos, "expected whitespace after maxval")),
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(pos, format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format(pos, "zero image dimension"));
    }
    Ok((w, h, maxval, pos))
}

fn check_payload(bytes: &[u8], offset: usize, needed: usize) -> Result<&[u8]> {
    let have = bytes.len() - offset;
    if have < needed {
        return Err(Error::format(
            bytes.len(),
            format!("truncated data: {needed} bytes expected, {have} present"),
        ));
    }
    if have > needed {
        return Err(Error::format(
            offset + needed,
            "trailing bytes after pixel data",
        ));
    }
    Ok(&bytes[offset..])
}

/// Binary PPM (P6) of a `[3, H, W]` image in `[0, 1]`.
pub fn encode_ppm(image: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((d[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (w, h, _, off) = parse_header(bytes, b"P6")?;
    let px = check_payload(bytes, off, 3 * w * h)?;
    let mut data = vec![0f32; 3 * w * h];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = rgb[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new([3, h, w], data)?)
}

/// Binary PGM (P5) storing class indices directly.
pub fn encode_pgm(mask: &[u8], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(mask);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    let (w, h, _, off) = parse_header(bytes, b"P5")?;
    let px = check_payload(bytes, off, w * h)?;
    Ok((px.to_vec(), h, w))
}

/// Writes `<dir>/<id>.ppm` and `<dir>/<id>_mask.pgm`; returns both paths.
pub fn save_sample(dir: &Path, sample: &Sample) -> Result<(PathBuf, PathBuf)> {
    let image = dir.join(format!("{}.ppm", sample.id));
    let mask = dir.join(format!("{}_mask.pgm", sample.id));
    write_file(&image, &encode_ppm(&sample.image))?;
    write_file(
        &mask,
        &encode_pgm(&sample.mask, sample.height(), sample.width()),
    )?;
    Ok((image, mask))
}

pub fn load_sample(
    image_path: &Path,
    mask_path: &Path,
    id: &str,
    domain: Domain,
) -> Result<Sample> {
    let image = decode_ppm(&read_file(image_path)?)?;
    let (mask, h, w) = decode_pgm(&read_file(mask_path)?)?;
    if [h, w] != image.shape()[1..] {
        return Err(Error::Contract(format!(
            "mask {h}x{w} does not match image for {id}"
        )));
    }
    if let Some(&c) = mask.iter().find(|&&c| c as usize >= NUM_CLASSES) {
        return Err(Error::Contract(format!("mask for {id} holds class {c}")));
    }
    Ok(Sample {
        id: id.to_owned(),
        image,
        mask,
        domain,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub domain: Domain,
    /// Paths relative to the manifest's directory.
    pub image: String,
    pub mask: String,
    pub split: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn samples(&self, dir: &Path, split: &str) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| load_sample(&dir.join(&e.image), &dir.join(&e.mask), &e.id, e.domain))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(path, text.as_bytes())
    }
}

/// Writes every split's samples under `dir` plus `dir/manifest.json`.
pub fn write_dataset(dir: &Path, splits: &[(&str, &[Sample])]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for (split, samples) in splits {
        for s in *samples {
            save_sample(dir, s)?;
            manifest.entries.push(ManifestEntry {
                id: s.id.clone(),
                domain: s.domain,
                image: format!("{}.ppm", s.id),
                mask: format!("{}_mask.pgm", s.id),
                split: (*split).to_owned(),
            });
        }
    }
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
