//! Post-hoc watermark encoder/extractor pretraining with attack
//! augmentation.
//!
//! The extractor produced here is the knowledge-transfer source for adapter
//! training: it is pretrained against the same attack family the evaluation
//! uses (differentiable JPEG, crop, brightness, noise) so robustness is
//! inherited rather than relearned. The encoder exists only for this
//! pretraining and is discarded afterwards.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use candle_nn::ops::leaky_relu;
use candle_nn::{AdamW, Conv2d, Linear, Module, Optimizer, ParamsAdamW, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::djpeg::differentiable_jpeg;
use crate::error::{Error, Result};
use crate::images::ImageBatch;
use crate::keys::{keys_to_targets, BitLogits, WatermarkKey, KEY_BITS};
use crate::nn::{checksum_tensors, conv2d, conv_cfg, linear, varmap_tensors, Builder};

const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PosthocConfig {
    pub enc_channels: usize,
    pub ext_channels: usize,
    pub bits: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Weight of the image-consistency MSE term next to the bit BCE.
    pub image_weight: f64,
    pub augment: bool,
    pub jpeg_quality: (u32, u32),
    pub crop_area: (f64, f64),
    pub brightness: (f64, f64),
    pub noise_sigma_max: f64,
}

impl Default for PosthocConfig {
    fn default() -> Self {
        Self {
            enc_channels: 16,
            ext_channels: 32,
            bits: KEY_BITS,
            steps: 1500,
            batch: 4,
            lr: 1e-3,
            image_weight: 0.7,
            augment: true,
            jpeg_quality: (50, 90),
            crop_area: (0.3, 1.0),
            brightness: (0.7, 1.5),
            noise_sigma_max: 0.05,
        }
    }
}

/// Convolutional watermark embedder: (image, key) -> watermarked image.
/// The final residual conv starts at zero so training begins from identity;
/// output stays in [-1, 1] by clamping.
pub struct WmEncoder {
    cfg: PosthocConfig,
    conv1: Conv2d,
    conv2: Conv2d,
    merge: Conv2d,
    out: Conv2d,
    tensors: BTreeMap<String, Tensor>,
}

impl WmEncoder {
    fn build(vb: &Builder, cfg: &PosthocConfig) -> Result<Self> {
        let c = cfg.enc_channels;
        let vb = vb.pp("wm_encoder");
        let conv1 = conv2d(&vb, "conv1", 3, c, 3, conv_cfg(1, 1), false)?;
        let conv2 = conv2d(&vb, "conv2", c, c, 3, conv_cfg(1, 1), false)?;
        let merge = conv2d(&vb, "merge", c + cfg.bits + 3, c, 3, conv_cfg(1, 1), false)?;
        let out = conv2d(&vb, "out", c, 3, 3, conv_cfg(1, 1), true)?;
        Ok(Self {
            cfg: cfg.clone(),
            conv1,
            conv2,
            merge,
            out,
            tensors: BTreeMap::new(),
        })
    }

    pub fn fresh(cfg: &PosthocConfig, map: &VarMap, rng: ChaCha8Rng, device: &Device) -> Result<Self> {
        let vb = Builder::fresh(map, rng, DType::F32, device);
        let mut enc = Self::build(&vb, cfg)?;
        enc.tensors = varmap_tensors(map)
            .into_iter()
            .filter(|(k, _)| k.starts_with("wm_encoder."))
            .collect();
        Ok(enc)
    }

    pub fn from_tensors(
        cfg: &PosthocConfig,
        tensors: &BTreeMap<String, Tensor>,
        device: &Device,
    ) -> Result<Self> {
        let vb = Builder::frozen(tensors, DType::F32, device);
        let mut enc = Self::build(&vb, cfg)?;
        enc.tensors = tensors
            .iter()
            .filter(|(k, _)| k.starts_with("wm_encoder."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(enc)
    }

    pub fn config(&self) -> &PosthocConfig {
        &self.cfg
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn embed_tensor(&self, images: &Tensor, keys: &[WatermarkKey]) -> Result<Tensor> {
        let (n, _, h, w) = images.dims4()?;
        if keys.len() != n {
            return Err(Error::Shape {
                context: "WmEncoder::embed".to_string(),
                expected: format!("{n} keys"),
                actual: format!("{}", keys.len()),
            });
        }
        let dtype = images.dtype();
        let keymap = crate::keys::keys_to_tensor(keys, dtype, images.device())?
            .reshape((n, self.cfg.bits, 1, 1))?
            .broadcast_as((n, self.cfg.bits, h, w))?
            .contiguous()?;
        let f = leaky_relu(&self.conv1.forward(images)?, LEAKY_SLOPE)?;
        let f = leaky_relu(&self.conv2.forward(&f)?, LEAKY_SLOPE)?;
        let merged = Tensor::cat(&[&f, &keymap, images], 1)?;
        let f = leaky_relu(&self.merge.forward(&merged)?, LEAKY_SLOPE)?;
        let residual = self.out.forward(&f)?;
        Ok(images.add(&residual)?.clamp(-1.0, 1.0)?)
    }

    pub fn embed(&self, images: &ImageBatch, keys: &[WatermarkKey]) -> Result<ImageBatch> {
        ImageBatch::new(self.embed_tensor(images.tensor(), keys)?)
    }
}

/// Convolutional extractor: image -> 48 bit logits. Resolution tolerant via
/// global average pooling; minimum input 8x8.
pub struct WmExtractor {
    cfg: PosthocConfig,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    conv4: Conv2d,
    head: Linear,
    tensors: BTreeMap<String, Tensor>,
}

impl WmExtractor {
    fn build(vb: &Builder, cfg: &PosthocConfig) -> Result<Self> {
        let c = cfg.ext_channels;
        let vb = vb.pp("wm_extractor");
        let conv1 = conv2d(&vb, "conv1", 3, c / 2, 3, conv_cfg(1, 1), false)?;
        let conv2 = conv2d(&vb, "conv2", c / 2, c, 3, conv_cfg(1, 2), false)?;
        let conv3 = conv2d(&vb, "conv3", c, c, 3, conv_cfg(1, 1), false)?;
        let conv4 = conv2d(&vb, "conv4", c, cfg.bits, 3, conv_cfg(1, 2), false)?;
        let head = linear(&vb, "head", cfg.bits, cfg.bits, false)?;
        Ok(Self {
            cfg: cfg.clone(),
            conv1,
            conv2,
            conv3,
            conv4,
            head,
            tensors: BTreeMap::new(),
        })
    }

    pub fn fresh(cfg: &PosthocConfig, map: &VarMap, rng: ChaCha8Rng, device: &Device) -> Result<Self> {
        let vb = Builder::fresh(map, rng, DType::F32, device);
        let mut ext = Self::build(&vb, cfg)?;
        ext.tensors = varmap_tensors(map)
            .into_iter()
            .filter(|(k, _)| k.starts_with("wm_extractor."))
            .collect();
        Ok(ext)
    }

    pub fn from_tensors(
        cfg: &PosthocConfig,
        tensors: &BTreeMap<String, Tensor>,
        trainable: Option<&VarMap>,
        device: &Device,
    ) -> Result<Self> {
        match trainable {
            None => {
                let vb = Builder::frozen(tensors, DType::F32, device);
                let mut ext = Self::build(&vb, cfg)?;
                ext.tensors = tensors
                    .iter()
                    .filter(|(k, _)| k.starts_with("wm_extractor."))
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect();
                Ok(ext)
            }
            Some(map) => {
                {
                    let mut data = map.data().lock().unwrap();
                    for (k, v) in tensors {
                        if k.starts_with("wm_extractor.") {
                            data.insert(k.clone(), candle_core::Var::from_tensor(v)?);
                        }
                    }
                }
                let vb = Builder::stored(map, DType::F32, device);
                let mut ext = Self::build(&vb, cfg)?;
                ext.tensors = varmap_tensors(map)
                    .into_iter()
                    .filter(|(k, _)| k.starts_with("wm_extractor."))
                    .collect();
                Ok(ext)
            }
        }
    }

    pub fn config(&self) -> &PosthocConfig {
        &self.cfg
    }

    pub fn bits(&self) -> usize {
        self.cfg.bits
    }

    pub fn min_input(&self) -> usize {
        8
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn weights_checksum(&self) -> Result<String> {
        checksum_tensors(&self.tensors)
    }

    /// Logits of shape (n, 48); deterministic and differentiable with
    /// respect to the input image.
    pub fn extract_tensor(&self, images: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        if h < self.min_input() || w < self.min_input() {
            return Err(Error::Shape {
                context: "WmExtractor::extract".to_string(),
                expected: format!(">= {0}x{0}", self.min_input()),
                actual: format!("{h}x{w}"),
            });
        }
        let f = leaky_relu(&self.conv1.forward(images)?, LEAKY_SLOPE)?;
        let f = leaky_relu(&self.conv2.forward(&f)?, LEAKY_SLOPE)?;
        let f = leaky_relu(&self.conv3.forward(&f)?, LEAKY_SLOPE)?;
        let f = self.conv4.forward(&f)?;
        let pooled = f.mean(3)?.mean(2)?;
        Ok(self.head.forward(&pooled)?)
    }

    pub fn extract(&self, images: &ImageBatch) -> Result<Vec<BitLogits>> {
        BitLogits::from_tensor(&self.extract_tensor(images.tensor())?)
    }
}

/// One draw from the augmentation pool. Differentiable (or straight-through)
/// end to end, as adapter training backpropagates through it.
#[derive(Clone, Copy, Debug)]
pub enum Augmentation {
    Identity,
    DiffJpeg { quality: u32 },
    Crop { area: f64 },
    Brightness { factor: f64 },
    Noise { sigma: f64, seed: u64 },
}

impl Augmentation {
    pub fn sample(cfg: &PosthocConfig, rng: &mut ChaCha8Rng) -> Self {
        if !cfg.augment {
            return Self::Identity;
        }
        match rng.gen_range(0..5u32) {
            0 => Self::Identity,
            1 => Self::DiffJpeg {
                quality: rng.gen_range(cfg.jpeg_quality.0..=cfg.jpeg_quality.1),
            },
            2 => Self::Crop {
                area: rng.gen_range(cfg.crop_area.0..cfg.crop_area.1),
            },
            3 => Self::Brightness {
                factor: rng.gen_range(cfg.brightness.0..cfg.brightness.1),
            },
            _ => Self::Noise {
                sigma: rng.gen_range(0.0..cfg.noise_sigma_max),
                seed: rng.gen(),
            },
        }
    }

    pub fn apply(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        match *self {
            Self::Identity => Ok(x.clone()),
            Self::DiffJpeg { quality } => differentiable_jpeg(x, quality),
            Self::Crop { area } => {
                let (_, _, h, w) = x.dims4()?;
                let scale = area.sqrt();
                let nh = ((h as f64 * scale).floor() as usize).max(8);
                let nw = ((w as f64 * scale).floor() as usize).max(8);
                let y0 = rng.gen_range(0..=h - nh);
                let x0 = rng.gen_range(0..=w - nw);
                Ok(x.narrow(2, y0, nh)?.narrow(3, x0, nw)?.contiguous()?)
            }
            Self::Brightness { factor } => {
                let unit = crate::images::to_unit(x)?;
                let scaled = unit.affine(factor, 0.0)?.clamp(0.0, 1.0)?;
                Ok(scaled.affine(2.0, -1.0)?)
            }
            Self::Noise { sigma, seed } => {
                if sigma == 0.0 {
                    return Ok(x.clone());
                }
                let mut nrng = ChaCha8Rng::seed_from_u64(seed);
                let normal = Normal::new(0.0f32, sigma as f32)
                    .map_err(|e| Error::Config(format!("sigma {sigma}: {e}")))?;
                let unit = crate::images::to_unit(x)?;
                let noise: Vec<f32> = (0..unit.elem_count()).map(|_| normal.sample(&mut nrng)).collect();
                let noise = Tensor::from_vec(noise, unit.dims4()?, unit.device())?
                    .to_dtype(unit.dtype())?;
                let out = unit.add(&noise)?.clamp(0.0, 1.0)?;
                Ok(out.affine(2.0, -1.0)?)
            }
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::DiffJpeg { .. } => "diff-jpeg",
            Self::Crop { .. } => "crop",
            Self::Brightness { .. } => "brightness",
            Self::Noise { .. } => "noise",
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct PretrainReport {
    /// (step, train bce, validation clean accuracy) samples.
    pub curve: Vec<(usize, f64, f64)>,
    pub final_clean_accuracy: f64,
    pub augmentations_seen: Vec<String>,
    pub steps: usize,
}

pub struct PosthocPair {
    pub encoder: WmEncoder,
    pub extractor: WmExtractor,
    pub report: PretrainReport,
}

/// Pretrains the encoder/extractor pair. Fails with a `Divergence` error
/// carrying the tail of the training curve when clean accuracy ends at or
/// below chance + 0.05.
pub fn pretrain_posthoc(
    cfg: &PosthocConfig,
    corpus: &Corpus,
    val: &Corpus,
    seed: u64,
    device: &Device,
) -> Result<PosthocPair> {
    if corpus.is_empty() {
        return Err(Error::Data("posthoc pretraining needs a nonempty corpus".to_string()));
    }
    let map = VarMap::new();
    let encoder = WmEncoder::fresh(cfg, &map, ChaCha8Rng::seed_from_u64(seed ^ 0xE0C0), device)?;
    let extractor = {
        // Same map: both nets train together.
        let vb = Builder::fresh(
            &map,
            ChaCha8Rng::seed_from_u64(seed ^ 0xE17),
            DType::F32,
            device,
        );
        let mut ext = WmExtractor::build(&vb, cfg)?;
        ext.tensors = varmap_tensors(&map)
            .into_iter()
            .filter(|(k, _)| k.starts_with("wm_extractor."))
            .collect();
        ext
    };

    let mut opt = AdamW::new(
        map.all_vars(),
        ParamsAdamW {
            lr: cfg.lr,
            ..Default::default()
        },
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut curve = Vec::new();
    let mut augmentations_seen = std::collections::BTreeSet::new();

    for step in 0..cfg.steps {
        let mut indices = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            if cursor >= order.len() {
                order = corpus.epoch_order(&mut rng);
                cursor = 0;
            }
            indices.push(order[cursor]);
            cursor += 1;
        }
        let x = corpus.batch(&indices)?;
        let keys: Vec<WatermarkKey> = (0..cfg.batch).map(|_| WatermarkKey::random(&mut rng)).collect();

        let xw = encoder.embed_tensor(x.tensor(), &keys)?;
        let aug = Augmentation::sample(cfg, &mut rng);
        augmentations_seen.insert(aug.name().to_string());
        let attacked = aug.apply(&xw, &mut rng)?;
        let logits = extractor.extract_tensor(&attacked)?;
        let targets = keys_to_targets(&keys, DType::F32, device)?;
        let bce = crate::losses::bce_with_logits(&logits, &targets)?;
        let img = xw.sub(x.tensor())?.sqr()?.mean_all()?;
        let loss = bce.add(&img.affine(cfg.image_weight, 0.0)?)?;
        opt.backward_step(&loss)?;

        if step % 50 == 0 || step + 1 == cfg.steps {
            let bce_v = bce.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            let acc = clean_accuracy(&encoder, &extractor, val, seed ^ 0xACC)?;
            curve.push((step, bce_v, acc));
            log::info!("posthoc step {step}: bce {bce_v:.4}, clean acc {acc:.3}");
        }
    }

    let final_clean_accuracy = clean_accuracy(&encoder, &extractor, val, seed ^ 0xACC)?;
    if final_clean_accuracy <= 0.55 {
        let tail: Vec<String> = curve
            .iter()
            .rev()
            .take(6)
            .map(|(s, b, a)| format!("step {s}: bce {b:.4} acc {a:.3}"))
            .collect();
        return Err(Error::Divergence(format!(
            "posthoc clean accuracy {final_clean_accuracy:.3} <= 0.55 after {} steps; curve tail: {}",
            cfg.steps,
            tail.join("; ")
        )));
    }

    let report = PretrainReport {
        curve,
        final_clean_accuracy,
        augmentations_seen: augmentations_seen.into_iter().collect(),
        steps: cfg.steps,
    };
    Ok(PosthocPair {
        encoder,
        extractor,
        report,
    })
}

/// Mean bit accuracy of (embed -> extract) over a validation corpus with
/// seeded fresh keys.
pub fn clean_accuracy(
    encoder: &WmEncoder,
    extractor: &WmExtractor,
    val: &Corpus,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<WatermarkKey> = (0..val.len()).map(|_| WatermarkKey::random(&mut rng)).collect();
    let x = val.all()?;
    let xw = encoder.embed_tensor(x.tensor(), &keys)?;
    let logits = extractor.extract_tensor(&xw)?;
    accuracy_from_logits(&logits, &keys)
}

pub fn accuracy_from_logits(logits: &Tensor, keys: &[WatermarkKey]) -> Result<f64> {
    let per = BitLogits::from_tensor(logits)?;
    let mut total = 0usize;
    for (lb, key) in per.iter().zip(keys.iter()) {
        let decoded = lb.decode();
        total += KEY_BITS - decoded.hamming(*key) as usize;
    }
    Ok(total as f64 / (keys.len() * KEY_BITS) as f64)
}

/// Checkpoint helpers: the extractor manifest carries the bit count and
/// augmentation list; loading refuses extractors whose bit count is not 48.
pub fn save_extractor(
    path: &std::path::Path,
    extractor: &WmExtractor,
    report: &PretrainReport,
) -> Result<()> {
    let mut extra = BTreeMap::new();
    extra.insert("bits".to_string(), format!("{}", extractor.bits()));
    extra.insert(
        "augmentations".to_string(),
        report.augmentations_seen.join(","),
    );
    extra.insert("steps".to_string(), format!("{}", report.steps));
    extra.insert(
        "clean_accuracy".to_string(),
        format!("{:.4}", report.final_clean_accuracy),
    );
    crate::io::save_checkpoint(
        path,
        "wm-extractor",
        &serde_json::to_string(extractor.config())?,
        &extra,
        extractor.tensors(),
    )
}

pub fn load_extractor(path: &std::path::Path, device: &Device) -> Result<WmExtractor> {
    let ck = crate::io::load_checkpoint(path, device)?;
    if ck.kind != "wm-extractor" {
        return Err(Error::Checkpoint(format!(
            "{}: expected wm-extractor, found {}",
            path.display(),
            ck.kind
        )));
    }
    let bits: usize = ck
        .extra
        .get("bits")
        .and_then(|b| b.parse().ok())
        .unwrap_or(0);
    if bits != KEY_BITS {
        return Err(Error::Checkpoint(format!(
            "{}: extractor encodes {bits} bits, this toolkit requires {KEY_BITS}",
            path.display()
        )));
    }
    let cfg: PosthocConfig = serde_json::from_str(&ck.config_json)?;
    WmExtractor::from_tensors(&cfg, &ck.tensors, None, device)
}

pub fn save_encoder(path: &std::path::Path, encoder: &WmEncoder) -> Result<()> {
    crate::io::save_checkpoint(
        path,
        "wm-encoder",
        &serde_json::to_string(encoder.config())?,
        &BTreeMap::new(),
        encoder.tensors(),
    )
}

pub fn load_encoder(path: &std::path::Path, device: &Device) -> Result<WmEncoder> {
    let ck = crate::io::load_checkpoint(path, device)?;
    if ck.kind != "wm-encoder" {
        return Err(Error::Checkpoint(format!(
            "{}: expected wm-encoder, found {}",
            path.display(),
            ck.kind
        )));
    }
    let cfg: PosthocConfig = serde_json::from_str(&ck.config_json)?;
    WmEncoder::from_tensors(&cfg, &ck.tensors, device)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CorpusSpec;

    fn device() -> Device {
        Device::Cpu
    }

    fn small_cfg() -> PosthocConfig {
        PosthocConfig {
            steps: 10,
            ..Default::default()
        }
    }

    fn fresh_pair(seed: u64) -> (WmEncoder, WmExtractor) {
        let cfg = small_cfg();
        let map = VarMap::new();
        let enc = WmEncoder::fresh(&cfg, &map, ChaCha8Rng::seed_from_u64(seed), &device()).unwrap();
        let map2 = VarMap::new();
        let ext =
            WmExtractor::fresh(&cfg, &map2, ChaCha8Rng::seed_from_u64(seed ^ 1), &device()).unwrap();
        (enc, ext)
    }

    fn corpus(seed: u64, n: usize) -> Corpus {
        Corpus::load(
            &CorpusSpec::Synthetic { seed, count: n },
            32,
            &device(),
        )
        .unwrap()
    }

    #[test]
    fn untrained_pair_is_chance_level() {
        let (enc, ext) = fresh_pair(3);
        let val = corpus(5, 100);
        let acc = clean_accuracy(&enc, &ext, &val, 9).unwrap();
        assert!((acc - 0.5).abs() <= 0.03, "chance-level accuracy, got {acc}");
    }

    #[test]
    fn encoder_output_in_range_and_extraction_deterministic() {
        let (enc, ext) = fresh_pair(4);
        let val = corpus(6, 4);
        let x = val.all().unwrap();
        let keys: Vec<WatermarkKey> = (0..4).map(|i| crate::keys::random_key(i)).collect();
        let xw = enc.embed(&x, &keys).unwrap();
        let v = xw.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));

        let a = ext.extract_tensor(xw.tensor()).unwrap();
        let b = ext.extract_tensor(xw.tensor()).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn extractor_local_continuity() {
        let (_, ext) = fresh_pair(5);
        let val = corpus(7, 1);
        let x = val.all().unwrap();
        let a = ext.extract_tensor(x.tensor()).unwrap();
        let bumped = x.tensor().affine(1.0, 1e-7).unwrap().clamp(-1.0, 1.0).unwrap();
        let b = ext.extract_tensor(&bumped).unwrap();
        let d = a
            .sub(&b)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d < 1e-3, "logit jump {d}");
    }

    #[test]
    fn extractor_gradient_reaches_input() {
        let (_, ext) = fresh_pair(6);
        let val = corpus(8, 1);
        let var = candle_core::Var::from_tensor(val.all().unwrap().tensor()).unwrap();
        let logits = ext.extract_tensor(var.as_tensor()).unwrap();
        let loss = logits.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(&var).expect("input grad");
        let gmax = g.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(gmax > 0.0);
    }

    #[test]
    fn extractor_tolerates_cropped_resolutions() {
        let (_, ext) = fresh_pair(7);
        let val = corpus(9, 1);
        let x = val.all().unwrap();
        let cropped = crate::attacks::apply_attack(&x, &crate::attacks::AttackSpec::crop(0.3)).unwrap();
        let logits = ext.extract_tensor(cropped.tensor()).unwrap();
        assert_eq!(logits.dims(), &[1, 48]);
        // Below the minimum is an error.
        let tiny = x.tensor().narrow(2, 0, 4).unwrap().narrow(3, 0, 4).unwrap();
        assert!(ext.extract_tensor(&tiny.contiguous().unwrap()).is_err());
    }

    #[test]
    fn extractor_checkpoint_refuses_wrong_bits() {
        let (_, ext) = fresh_pair(8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.safetensors");
        let report = PretrainReport {
            final_clean_accuracy: 0.5,
            ..Default::default()
        };
        save_extractor(&path, &ext, &report).unwrap();
        assert!(load_extractor(&path, &device()).is_ok());

        // Rewrite the manifest with a wrong bit count.
        let ck = crate::io::load_checkpoint(&path, &device()).unwrap();
        let mut extra = ck.extra.clone();
        extra.insert("bits".to_string(), "32".to_string());
        crate::io::save_checkpoint(&path, "wm-extractor", &ck.config_json, &extra, &ck.tensors)
            .unwrap();
        let err = match load_extractor(&path, &device()) {
            Err(e) => e,
            Ok(_) => panic!("expected bit-count rejection"),
        };
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn augmentation_sampling_is_seeded() {
        let cfg = PosthocConfig::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(12);
        let mut r2 = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let a = format!("{:?}", Augmentation::sample(&cfg, &mut r1));
            let b = format!("{:?}", Augmentation::sample(&cfg, &mut r2));
            assert_eq!(a, b);
        }
    }
}
