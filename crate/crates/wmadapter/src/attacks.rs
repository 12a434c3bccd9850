//! Deterministic, parameterized evaluation-time attacks.
//!
//! Semantics (stamped into every report): jpeg is a real codec round trip on
//! 8-bit data; crop is a center crop retaining the given area fraction with
//! NO resize-back (the extractor consumes the cropped image; an optional
//! resize-back mode exists for sensitivity analysis); brightness is
//! multiplicative in [0,1] with clamping; noise is additive Gaussian in
//! [0,1] with clamping, seeded; combined is the fixed chain
//! crop 0.5 -> jpeg 80 -> brightness 1.5.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use image::ImageEncoder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::images::ImageBatch;

/// Human/machine-readable description of the attack conventions, embedded in
/// reports so results are self-describing.
pub const ATTACK_SEMANTICS: &str =
    "crop=center,area-fraction,no-resize;jpeg=codec-roundtrip-8bit;bright=mul-clamp-[0,1];\
     noise=gauss-add-clamp-[0,1],seeded;comb=crop0.5>jpeg80>bright1.5";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    None,
    Jpeg,
    Crop,
    Brightness,
    GaussianNoise,
    Combined,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// JPEG quality in [10, 100].
    pub quality: u32,
    /// Retained area fraction in (0, 1].
    pub area: f64,
    /// Brightness factor, > 0.
    pub factor: f64,
    /// Gaussian sigma in [0,1] space, >= 0.
    pub sigma: f64,
    /// Seed for stochastic attacks.
    pub seed: u64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            quality: 80,
            area: 1.0,
            factor: 1.0,
            sigma: 0.0,
            seed: 0,
        }
    }
}

impl AttackSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn jpeg(quality: u32) -> Self {
        Self {
            kind: AttackKind::Jpeg,
            quality,
            ..Self::default()
        }
    }

    pub fn crop(area: f64) -> Self {
        Self {
            kind: AttackKind::Crop,
            area,
            ..Self::default()
        }
    }

    pub fn brightness(factor: f64) -> Self {
        Self {
            kind: AttackKind::Brightness,
            factor,
            ..Self::default()
        }
    }

    pub fn gaussian_noise(sigma: f64, seed: u64) -> Self {
        Self {
            kind: AttackKind::GaussianNoise,
            sigma,
            seed,
            ..Self::default()
        }
    }

    /// The fixed chain crop 0.5 -> jpeg 80 -> brightness 1.5.
    pub fn combined() -> Self {
        Self {
            kind: AttackKind::Combined,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            AttackKind::Jpeg if !(10..=100).contains(&self.quality) => Err(Error::Config(
                format!("jpeg quality must be in [10, 100], got {}", self.quality),
            )),
            AttackKind::Crop if !(self.area > 0.0 && self.area <= 1.0) => Err(Error::Config(
                format!("crop area must be in (0, 1], got {}", self.area),
            )),
            AttackKind::Brightness if self.factor <= 0.0 => Err(Error::Config(format!(
                "brightness factor must be > 0, got {}",
                self.factor
            ))),
            AttackKind::GaussianNoise if self.sigma < 0.0 => Err(Error::Config(format!(
                "noise sigma must be >= 0, got {}",
                self.sigma
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            AttackKind::None => write!(f, "none"),
            AttackKind::Jpeg => write!(f, "jpeg:{}", self.quality),
            AttackKind::Crop => write!(f, "crop:{}", self.area),
            AttackKind::Brightness => write!(f, "bright:{}", self.factor),
            AttackKind::GaussianNoise => {
                if self.seed == 0 {
                    write!(f, "noise:{}", self.sigma)
                } else {
                    write!(f, "noise:{}:{}", self.sigma, self.seed)
                }
            }
            AttackKind::Combined => write!(f, "comb"),
        }
    }
}

impl FromStr for AttackSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let parse_f = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|e| Error::Config(format!("bad attack parameter in {s:?}: {e}")))
        };
        let spec = match (parts[0], parts.len()) {
            ("none", 1) => Self::none(),
            ("jpeg", 2) => Self::jpeg(
                parts[1]
                    .parse::<u32>()
                    .map_err(|e| Error::Config(format!("bad jpeg quality in {s:?}: {e}")))?,
            ),
            ("crop", 2) => Self::crop(parse_f(parts[1])?),
            ("bright", 2) | ("brightness", 2) => Self::brightness(parse_f(parts[1])?),
            ("noise", 2) => Self::gaussian_noise(parse_f(parts[1])?, 0),
            ("noise", 3) => Self::gaussian_noise(
                parse_f(parts[1])?,
                parts[2]
                    .parse::<u64>()
                    .map_err(|e| Error::Config(format!("bad noise seed in {s:?}: {e}")))?,
            ),
            ("comb", 1) | ("combined", 1) => Self::combined(),
            _ => return Err(Error::Config(format!("unknown attack spec {s:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Applies the attack; output size differs from input only for crops.
pub fn apply_attack(images: &ImageBatch, spec: &AttackSpec) -> Result<ImageBatch> {
    spec.validate()?;
    match spec.kind {
        AttackKind::None => Ok(images.clone()),
        AttackKind::Jpeg => jpeg_roundtrip(images, spec.quality),
        AttackKind::Crop => center_crop(images, spec.area),
        AttackKind::Brightness => brightness(images, spec.factor),
        AttackKind::GaussianNoise => gaussian_noise(images, spec.sigma, spec.seed),
        AttackKind::Combined => {
            let x = center_crop(images, 0.5)?;
            let x = jpeg_roundtrip(&x, 80)?;
            brightness(&x, 1.5)
        }
    }
}

/// Real codec round trip: [-1,1] -> 8-bit -> encode(q) -> decode -> [-1,1].
fn jpeg_roundtrip(images: &ImageBatch, quality: u32) -> Result<ImageBatch> {
    let mut decoded = Vec::new();
    for img in images.to_rgb8()? {
        let mut buf = Vec::new();
        let enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality as u8);
        enc.write_image(
            img.as_raw(),
            img.width(),
            img.height(),
            image::ExtendedColorType::Rgb8,
        )?;
        decoded.push(image::load_from_memory(&buf)?.to_rgb8());
    }
    ImageBatch::from_rgb8(&decoded, images.tensor().device())
}

/// Center crop retaining area fraction `r`: side scale sqrt(r), floored.
fn center_crop(images: &ImageBatch, area: f64) -> Result<ImageBatch> {
    let (_, _, h, w) = images.dims();
    let scale = area.sqrt();
    let nh = ((h as f64) * scale).floor() as usize;
    let nw = ((w as f64) * scale).floor() as usize;
    if nh == 0 || nw == 0 {
        return Err(Error::Config(format!(
            "crop area {area} leaves no pixels of {h}x{w}"
        )));
    }
    let y0 = (h - nh) / 2;
    let x0 = (w - nw) / 2;
    let t = images.tensor().narrow(2, y0, nh)?.narrow(3, x0, nw)?.contiguous()?;
    ImageBatch::new(t)
}

/// Optional resize-back mode for sensitivity analysis: crop then scale back
/// to the source size with the codec-grade triangle filter.
pub fn center_crop_resize_back(images: &ImageBatch, area: f64) -> Result<ImageBatch> {
    let (_, _, h, w) = images.dims();
    let cropped = center_crop(images, area)?;
    let mut resized = Vec::new();
    for img in cropped.to_rgb8()? {
        resized.push(image::imageops::resize(
            &img,
            w as u32,
            h as u32,
            image::imageops::FilterType::Triangle,
        ));
    }
    ImageBatch::from_rgb8(&resized, images.tensor().device())
}

/// Multiplicative scaling in [0,1] space with clamping.
fn brightness(images: &ImageBatch, factor: f64) -> Result<ImageBatch> {
    let unit = images.to_unit()?;
    let scaled = unit.affine(factor, 0.0)?.clamp(0.0, 1.0)?;
    ImageBatch::from_unit(&scaled)
}

/// Additive Gaussian noise in [0,1] space with clamping; seeded.
fn gaussian_noise(images: &ImageBatch, sigma: f64, seed: u64) -> Result<ImageBatch> {
    if sigma == 0.0 {
        return Ok(images.clone());
    }
    let unit = images.to_unit()?;
    let dims = unit.dims4()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, sigma as f32)
        .map_err(|e| Error::Config(format!("noise sigma {sigma}: {e}")))?;
    let n = unit.elem_count();
    let noise: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let noise = Tensor::from_vec(noise, dims, unit.device())?;
    let out = unit.add(&noise)?.clamp(0.0, 1.0)?;
    ImageBatch::from_unit(&out)
}
