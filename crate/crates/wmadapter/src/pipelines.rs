//! Training pipelines: toy autoencoder pretraining, stage-1 adapter training
//! against frozen decoder and extractor, and the three stage-2 finetuning
//! strategies with their distinct inference-bundle semantics.
//!
//! Strategy tags follow the deployment convention: B (no finetuning),
//! F (fixed: decoder frozen during finetuning), V (joint: finetuned decoder
//! deployed), I (hybrid: decoder finetuned during training but the ORIGINAL
//! decoder deployed).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterVariant, WmAdapter};
use crate::config::RunConfig;
use crate::data::Corpus;
use crate::decoder::{DecoderConfig, HookedDecoder, ToyDecoder, ToyEncoder};
use crate::error::{Error, Result};
use crate::images::{ImageBatch, LatentBatch};
use crate::keys::WatermarkKey;
use crate::losses::{total_loss, FeatureNet, LossReport, Stage};
use crate::nn::{checksum_tensors, varmap_tensors};
use crate::posthoc::{accuracy_from_logits, Augmentation, WmExtractor};

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub report: LossReport,
    pub clean_accuracy: Option<f64>,
    pub psnr: Option<f64>,
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(
        "step,lr,loss_mae,loss_lpips,loss_watson_vgg,loss_bce,loss_tv,loss_total,clean_accuracy,psnr\n",
    );
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.8},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            r.step,
            r.lr,
            r.report.mae,
            r.report.lpips,
            r.report.watson_vgg,
            r.report.bce,
            r.report.tv,
            r.report.total,
            opt(r.clean_accuracy),
            opt(r.psnr),
        ));
    }
    out
}

/// Latents (and clean decodes) for a corpus, encoded once with the frozen
/// encoder and cached: adapter training never touches the encoder again.
pub struct LatentCache {
    latents: Vec<Tensor>,
    clean: Vec<Tensor>,
}

impl LatentCache {
    pub fn build(encoder: &ToyEncoder, decoder: &ToyDecoder, corpus: &Corpus) -> Result<Self> {
        let mut latents = Vec::with_capacity(corpus.len());
        let mut clean = Vec::with_capacity(corpus.len());
        let chunk = 16;
        let mut i = 0;
        while i < corpus.len() {
            let n = chunk.min(corpus.len() - i);
            let idx: Vec<usize> = (i..i + n).collect();
            let x = corpus.batch(&idx)?;
            let z = encoder.encode(&x)?;
            let x_clean = decoder.decode(&z, None)?;
            for j in 0..n {
                latents.push(z.tensor().narrow(0, j, 1)?.contiguous()?);
                clean.push(x_clean.tensor().narrow(0, j, 1)?.contiguous()?);
            }
            i += n;
        }
        Ok(Self { latents, clean })
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn latent_batch(&self, indices: &[usize]) -> Result<LatentBatch> {
        let picks: Vec<&Tensor> = indices.iter().map(|&i| &self.latents[i]).collect();
        LatentBatch::new(Tensor::cat(&picks, 0)?)
    }

    pub fn clean_batch(&self, indices: &[usize]) -> Result<ImageBatch> {
        let picks: Vec<&Tensor> = indices.iter().map(|&i| &self.clean[i]).collect();
        ImageBatch::new(Tensor::cat(&picks, 0)?)
    }
}

pub struct AutoencoderOutcome {
    pub encoder: ToyEncoder,
    pub decoder: ToyDecoder,
    pub encoder_tensors: BTreeMap<String, Tensor>,
    pub decoder_tensors: BTreeMap<String, Tensor>,
    pub val_psnr: f64,
}

/// Pretrains the toy autoencoder with a plain reconstruction objective; the
/// decoder becomes the frozen host for watermark work, the encoder is kept
/// only to produce latents.
pub fn pretrain_autoencoder(
    cfg: &RunConfig,
    corpus: &Corpus,
    val: &Corpus,
    device: &Device,
) -> Result<AutoencoderOutcome> {
    let map = VarMap::new();
    let enc = ToyEncoder::fresh(
        &cfg.decoder,
        &map,
        ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xAE_EC),
        device,
    )?;
    let dec = ToyDecoder::fresh(
        &cfg.decoder,
        &map,
        ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xAE_DC),
        device,
    )?;
    let mut opt = AdamW::new(
        map.all_vars(),
        ParamsAdamW {
            lr: cfg.autoencoder.lr,
            weight_decay: cfg.optim.weight_decay,
            beta1: cfg.optim.beta1,
            beta2: cfg.optim.beta2,
            eps: cfg.optim.eps,
        },
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xAE_11);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    for step in 0..cfg.autoencoder.steps {
        let mut indices = Vec::with_capacity(cfg.autoencoder.batch);
        for _ in 0..cfg.autoencoder.batch {
            if cursor >= order.len() {
                order = corpus.epoch_order(&mut rng);
                cursor = 0;
            }
            indices.push(order[cursor]);
            cursor += 1;
        }
        let x = corpus.batch(&indices)?;
        let z = enc.encode_tensor(x.tensor())?;
        let rec = dec.decode_with(&z, None)?;
        let loss = rec.sub(x.tensor())?.sqr()?.mean_all()?;
        opt.backward_step(&loss)?;
        if step % 100 == 0 {
            log::info!(
                "autoencoder step {step}: mse {:.5}",
                loss.to_dtype(DType::F64)?.to_scalar::<f64>()?
            );
        }
    }

    let xv = val.all()?;
    let rec = ImageBatch::new(dec.decode_with(&enc.encode_tensor(xv.tensor())?, None)?)?;
    let val_psnr = crate::eval::psnr(&xv, &rec)?;
    log::info!("autoencoder validation psnr: {val_psnr:.2} dB");

    let encoder_tensors: BTreeMap<String, Tensor> = varmap_tensors(&map)
        .into_iter()
        .filter(|(k, _)| k.starts_with("encoder."))
        .map(|(k, t)| Ok((k, t.copy()?)))
        .collect::<Result<_>>()?;
    let decoder_tensors: BTreeMap<String, Tensor> = varmap_tensors(&map)
        .into_iter()
        .filter(|(k, _)| k.starts_with("decoder."))
        .map(|(k, t)| Ok((k, t.copy()?)))
        .collect::<Result<_>>()?;
    Ok(AutoencoderOutcome {
        encoder: enc,
        decoder: dec,
        encoder_tensors,
        decoder_tensors,
        val_psnr,
    })
}

pub struct FrozenChecksums {
    pub decoder: String,
    pub extractor: String,
}

pub struct TrainState {
    pub adapter: WmAdapter,
    pub adapter_map: VarMap,
    pub frozen: FrozenChecksums,
    pub step: usize,
    pub metrics: Vec<MetricsRow>,
    pub val_clean_accuracy: f64,
    pub val_psnr: f64,
}

pub struct ValSet {
    latents: LatentBatch,
    clean: ImageBatch,
    keys: Vec<WatermarkKey>,
}

impl ValSet {
    pub fn build(
        encoder: &ToyEncoder,
        decoder: &ToyDecoder,
        val: &Corpus,
        seed: u64,
    ) -> Result<Self> {
        let x = val.all()?;
        let latents = encoder.encode(&x)?;
        let clean = decoder.decode(&latents, None)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys: Vec<WatermarkKey> = (0..val.len())
            .map(|_| WatermarkKey::random(&mut rng))
            .collect();
        Ok(Self { latents, clean, keys })
    }

    /// (clean bit accuracy, PSNR) of the adapter through a decoder.
    pub fn evaluate(
        &self,
        adapter: &WmAdapter,
        decoder: &dyn HookedDecoder,
        extractor: &WmExtractor,
    ) -> Result<(f64, f64)> {
        let injectors = adapter.injectors(&self.keys);
        let xw = ImageBatch::new(decoder.decode_with(self.latents.tensor(), Some(&injectors))?)?;
        let logits = extractor.extract_tensor(xw.tensor())?;
        let acc = accuracy_from_logits(&logits, &self.keys)?;
        let psnr = crate::eval::psnr(&self.clean, &xw)?;
        Ok((acc, psnr))
    }

    pub fn keys(&self) -> &[WatermarkKey] {
        &self.keys
    }

    pub fn latents(&self) -> &LatentBatch {
        &self.latents
    }

    pub fn clean(&self) -> &ImageBatch {
        &self.clean
    }
}

fn adamw(vars: Vec<candle_core::Var>, lr: f64, cfg: &RunConfig) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: cfg.optim.weight_decay,
            beta1: cfg.optim.beta1,
            beta2: cfg.optim.beta2,
            eps: cfg.optim.eps,
        },
    )?)
}

/// Stage-1 training: frozen decoder and extractor, adapter only. Keys are
/// resampled uniformly per sample per step so the adapter generalizes over
/// the whole key space instead of memorizing.
///
/// `trainable_extractor` is the knowledge-transfer ablation: the extractor's
/// weights join the optimizer (pass one built over `extractor_map`). The
/// frozen-extractor invariant is enforced only in the normal mode.
pub fn train_stage1(
    cfg: &RunConfig,
    decoder: &ToyDecoder,
    extractor: &WmExtractor,
    extractor_map: Option<&VarMap>,
    cache: &LatentCache,
    val: &ValSet,
    device: &Device,
) -> Result<TrainState> {
    if cache.is_empty() {
        return Err(Error::Data("stage-1 training needs a nonempty latent cache".to_string()));
    }
    let decoder_checksum = decoder.weights_checksum()?;
    let extractor_checksum = extractor.weights_checksum()?;

    let variant: AdapterVariant = cfg.adapter_variant.parse()?;
    let adapter_map = VarMap::new();
    let adapter = WmAdapter::fresh(
        variant,
        decoder.sites(),
        &adapter_map,
        ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xADA0),
        device,
    )?;

    let mut vars = adapter_map.all_vars();
    if let Some(map) = extractor_map {
        vars.extend(map.all_vars());
    }
    let mut opt = adamw(vars, cfg.stage1.lr, cfg)?;
    let net = FeatureNet::desk(cfg.perceptual_seed, DType::F32, device)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x51A6E1);
    let steps_per_epoch = cache.len().div_ceil(cfg.stage1.batch);
    let total_steps = steps_per_epoch * cfg.stage1.epochs;
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;

    for step in 0..total_steps {
        let mut indices = Vec::with_capacity(cfg.stage1.batch);
        for _ in 0..cfg.stage1.batch {
            if cursor >= order.len() {
                order = (0..cache.len()).collect();
                for i in (1..order.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    order.swap(i, j);
                }
                cursor = 0;
            }
            indices.push(order[cursor]);
            cursor += 1;
        }
        let z = cache.latent_batch(&indices)?;
        let x = cache.clean_batch(&indices)?;
        let keys: Vec<WatermarkKey> = (0..indices.len())
            .map(|_| WatermarkKey::random(&mut rng))
            .collect();

        let injectors = adapter.injectors(&keys);
        let xw = decoder.decode_with(z.tensor(), Some(&injectors))?;
        let attacked = if cfg.stage1.augment {
            let aug = Augmentation::sample(&cfg.posthoc, &mut rng);
            aug.apply(&xw, &mut rng)?
        } else {
            xw.clone()
        };
        let logits = extractor.extract_tensor(&attacked)?;
        let out = total_loss(x.tensor(), &xw, &logits, &keys, &cfg.loss, Stage::Train, &net)?;
        opt.backward_step(&out.total)?;

        if step % cfg.stage1.log_every == 0 || step + 1 == total_steps {
            let (acc, psnr) = val.evaluate(&adapter, decoder, extractor)?;
            metrics.push(MetricsRow {
                step,
                lr: cfg.stage1.lr,
                report: out.report,
                clean_accuracy: Some(acc),
                psnr: Some(psnr),
            });
            log::info!(
                "stage1 step {step}/{total_steps}: total {:.4} bce {:.4} acc {acc:.3} psnr {psnr:.1}",
                out.report.total,
                out.report.bce
            );
        }
    }

    if decoder.weights_checksum()? != decoder_checksum {
        return Err(Error::Integrity(
            "frozen decoder weights drifted during stage-1 training".to_string(),
        ));
    }
    if extractor_map.is_none() && extractor.weights_checksum()? != extractor_checksum {
        return Err(Error::Integrity(
            "frozen extractor weights drifted during stage-1 training".to_string(),
        ));
    }

    let (val_clean_accuracy, val_psnr) = val.evaluate(&adapter, decoder, extractor)?;
    Ok(TrainState {
        adapter,
        adapter_map,
        frozen: FrozenChecksums {
            decoder: decoder_checksum,
            extractor: extractor_checksum,
        },
        step: total_steps,
        metrics,
        val_clean_accuracy,
        val_psnr,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneStrategy {
    Fixed,
    Joint,
    Hybrid,
}

impl FromStr for FinetuneStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "joint" => Ok(Self::Joint),
            "hybrid" => Ok(Self::Hybrid),
            other => Err(Error::Config(format!("unknown finetune strategy {other:?}"))),
        }
    }
}

/// Deployment tag: which adapter/decoder pair a bundle ships.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyTag {
    B,
    F,
    V,
    I,
}

impl fmt::Display for StrategyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::B => "B",
            Self::F => "F",
            Self::V => "V",
            Self::I => "I",
        })
    }
}

impl FromStr for StrategyTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B" => Ok(Self::B),
            "F" => Ok(Self::F),
            "V" => Ok(Self::V),
            "I" => Ok(Self::I),
            other => Err(Error::Config(format!("unknown strategy tag {other:?}"))),
        }
    }
}

/// Adapter + decoder checkpoint pair with deployment semantics. Tags B, F
/// and I carry the original decoder; tag V carries the finetuned one.
pub struct InferenceBundle {
    pub tag: StrategyTag,
    pub adapter_cfg: AdapterConfig,
    pub adapter_tensors: BTreeMap<String, Tensor>,
    pub decoder_cfg: DecoderConfig,
    pub decoder_tensors: BTreeMap<String, Tensor>,
    pub adapter_checksum: String,
    pub decoder_checksum: String,
    pub original_decoder_checksum: String,
    pub encoder_tensors: Option<BTreeMap<String, Tensor>>,
}

impl InferenceBundle {
    pub fn session(&self, device: &Device) -> Result<InferenceSession> {
        let sites = self.decoder_cfg.hook_sites();
        let decoder = ToyDecoder::from_tensors(&self.decoder_cfg, &self.decoder_tensors, None, device)?;
        let mut adapter = WmAdapter::from_tensors(
            self.adapter_cfg.variant,
            &sites,
            &self.adapter_tensors,
            None,
            device,
        )?;
        adapter.trained_against = Some(self.decoder_checksum.clone());
        let encoder = match &self.encoder_tensors {
            Some(t) => Some(ToyEncoder::from_tensors(&self.decoder_cfg, t, device)?),
            None => None,
        };
        Ok(InferenceSession {
            tag: self.tag,
            decoder,
            adapter,
            encoder,
        })
    }
}

/// Loaded, ready-to-run bundle.
pub struct InferenceSession {
    pub tag: StrategyTag,
    pub decoder: ToyDecoder,
    pub adapter: WmAdapter,
    pub encoder: Option<ToyEncoder>,
}

impl InferenceSession {
    pub fn embed(&self, latents: &LatentBatch, keys: &[WatermarkKey]) -> Result<ImageBatch> {
        self.adapter.apply(&self.decoder, latents, keys)
    }

    pub fn decode_plain(&self, latents: &LatentBatch) -> Result<ImageBatch> {
        self.decoder.decode(latents, None)
    }

    pub fn encode(&self, images: &ImageBatch) -> Result<LatentBatch> {
        match &self.encoder {
            Some(enc) => enc.encode(images),
            None => Err(Error::Checkpoint(
                "bundle carries no encoder; provide latents directly or an encoder checkpoint"
                    .to_string(),
            )),
        }
    }
}

pub struct FinetuneOutcome {
    pub bundles: Vec<InferenceBundle>,
    pub metrics: Vec<MetricsRow>,
}

fn cosine_lr(cfg_lr: f64, warmup: usize, total: usize, step: usize, schedule: &str) -> f64 {
    if schedule == "constant" {
        return cfg_lr;
    }
    if warmup > 0 && step < warmup {
        return cfg_lr * (step + 1) as f64 / warmup as f64;
    }
    let t = (step - warmup) as f64 / (total - warmup).max(1) as f64;
    cfg_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Stage-2 finetuning from stage-1 adapter weights. All strategies add the
/// TV term. Fixed freezes the decoder and yields an F bundle; Joint trains
/// both and yields a V bundle plus the hybrid I bundle (same training run,
/// original decoder deployed); Hybrid yields only the I bundle.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    cfg: &RunConfig,
    strategy: FinetuneStrategy,
    stage1_adapter_tensors: &BTreeMap<String, Tensor>,
    original_decoder_tensors: &BTreeMap<String, Tensor>,
    extractor: &WmExtractor,
    cache: &LatentCache,
    val: &ValSet,
    encoder_tensors: Option<&BTreeMap<String, Tensor>>,
    device: &Device,
) -> Result<FinetuneOutcome> {
    let variant: AdapterVariant = cfg.adapter_variant.parse()?;
    let sites = cfg.decoder.hook_sites();
    let extractor_checksum = extractor.weights_checksum()?;
    let original_decoder_checksum = checksum_tensors(original_decoder_tensors)?;

    let adapter_map = VarMap::new();
    let adapter = WmAdapter::from_tensors(
        variant,
        &sites,
        stage1_adapter_tensors,
        Some(&adapter_map),
        device,
    )?;

    let decoder_map = VarMap::new();
    let decoder = match strategy {
        FinetuneStrategy::Fixed => {
            ToyDecoder::from_tensors(&cfg.decoder, original_decoder_tensors, None, device)?
        }
        FinetuneStrategy::Joint | FinetuneStrategy::Hybrid => ToyDecoder::from_tensors(
            &cfg.decoder,
            original_decoder_tensors,
            Some(&decoder_map),
            device,
        )?,
    };

    let mut vars = adapter_map.all_vars();
    vars.extend(decoder_map.all_vars());
    let mut opt = adamw(vars, cfg.stage2.lr, cfg)?;
    let net = FeatureNet::desk(cfg.perceptual_seed, DType::F32, device)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x52A6E2);
    let mut metrics = Vec::new();
    let total = cfg.stage2.steps;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;

    for step in 0..total {
        let lr = cosine_lr(
            cfg.stage2.lr,
            cfg.stage2.warmup_steps,
            total,
            step,
            &cfg.stage2.schedule,
        );
        opt.set_learning_rate(lr);

        let mut indices = Vec::with_capacity(cfg.stage2.batch);
        for _ in 0..cfg.stage2.batch {
            if cursor >= order.len() {
                order = (0..cache.len()).collect();
                for i in (1..order.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    order.swap(i, j);
                }
                cursor = 0;
            }
            indices.push(order[cursor]);
            cursor += 1;
        }
        let z = cache.latent_batch(&indices)?;
        // The consistency target stays the ORIGINAL decoder's clean decode,
        // cached up front; it anchors joint finetuning to original behavior.
        let x = cache.clean_batch(&indices)?;
        let keys: Vec<WatermarkKey> = (0..indices.len())
            .map(|_| WatermarkKey::random(&mut rng))
            .collect();

        let injectors = adapter.injectors(&keys);
        let xw = decoder.decode_with(z.tensor(), Some(&injectors))?;
        let logits = extractor.extract_tensor(&xw)?;
        let out = total_loss(
            x.tensor(),
            &xw,
            &logits,
            &keys,
            &cfg.loss,
            Stage::Finetune,
            &net,
        )?;
        opt.backward_step(&out.total)?;

        if step % cfg.stage2.log_every == 0 || step + 1 == total {
            let (acc, psnr) = val.evaluate(&adapter, &decoder, extractor)?;
            metrics.push(MetricsRow {
                step,
                lr,
                report: out.report,
                clean_accuracy: Some(acc),
                psnr: Some(psnr),
            });
            log::info!(
                "stage2[{strategy:?}] step {step}/{total}: lr {lr:.2e} total {:.4} acc {acc:.3} psnr {psnr:.1}",
                out.report.total
            );
        }
    }

    if extractor.weights_checksum()? != extractor_checksum {
        return Err(Error::Integrity(
            "frozen extractor weights drifted during finetuning".to_string(),
        ));
    }
    if strategy == FinetuneStrategy::Fixed && decoder.weights_checksum()? != original_decoder_checksum
    {
        return Err(Error::Integrity(
            "decoder weights drifted during fixed finetuning".to_string(),
        ));
    }

    let adapter_tensors: BTreeMap<String, Tensor> = varmap_tensors(&adapter_map)
        .into_iter()
        .map(|(k, t)| Ok((k, t.copy()?)))
        .collect::<Result<_>>()?;
    let adapter_checksum = checksum_tensors(&adapter_tensors)?;
    let adapter_cfg = AdapterConfig {
        variant,
        site_channels: sites.iter().map(|s| s.channels).collect(),
    };

    let make = |tag: StrategyTag, dec_tensors: BTreeMap<String, Tensor>| -> Result<InferenceBundle> {
        let decoder_checksum = checksum_tensors(&dec_tensors)?;
        Ok(InferenceBundle {
            tag,
            adapter_cfg: adapter_cfg.clone(),
            adapter_tensors: adapter_tensors.clone(),
            decoder_cfg: cfg.decoder.clone(),
            decoder_tensors: dec_tensors,
            adapter_checksum: adapter_checksum.clone(),
            decoder_checksum,
            original_decoder_checksum: original_decoder_checksum.clone(),
            encoder_tensors: encoder_tensors.cloned(),
        })
    };

    let original_copy = || -> Result<BTreeMap<String, Tensor>> {
        original_decoder_tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.copy()?)))
            .collect()
    };
    let finetuned_copy = || -> Result<BTreeMap<String, Tensor>> {
        varmap_tensors(&decoder_map)
            .into_iter()
            .map(|(k, t)| Ok((k, t.copy()?)))
            .collect()
    };

    let bundles = match strategy {
        FinetuneStrategy::Fixed => vec![make(StrategyTag::F, original_copy()?)?],
        FinetuneStrategy::Joint => vec![
            make(StrategyTag::V, finetuned_copy()?)?,
            make(StrategyTag::I, original_copy()?)?,
        ],
        FinetuneStrategy::Hybrid => vec![make(StrategyTag::I, original_copy()?)?],
    };

    Ok(FinetuneOutcome { bundles, metrics })
}

/// Stage-1 state as a deployable bundle (tag B: no finetuning).
pub fn bundle_from_stage1(
    cfg: &RunConfig,
    state: &TrainState,
    original_decoder_tensors: &BTreeMap<String, Tensor>,
    encoder_tensors: Option<&BTreeMap<String, Tensor>>,
) -> Result<InferenceBundle> {
    let variant: AdapterVariant = cfg.adapter_variant.parse()?;
    let sites = cfg.decoder.hook_sites();
    let adapter_tensors: BTreeMap<String, Tensor> = state
        .adapter
        .tensors()
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.copy()?)))
        .collect::<Result<_>>()?;
    let decoder_tensors: BTreeMap<String, Tensor> = original_decoder_tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.copy()?)))
        .collect::<Result<_>>()?;
    let adapter_checksum = checksum_tensors(&adapter_tensors)?;
    let decoder_checksum = checksum_tensors(&decoder_tensors)?;
    Ok(InferenceBundle {
        tag: StrategyTag::B,
        adapter_cfg: AdapterConfig {
            variant,
            site_channels: sites.iter().map(|s| s.channels).collect(),
        },
        adapter_tensors,
        decoder_cfg: cfg.decoder.clone(),
        decoder_tensors,
        adapter_checksum,
        decoder_checksum: decoder_checksum.clone(),
        original_decoder_checksum: decoder_checksum,
        encoder_tensors: encoder_tensors.cloned(),
    })
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    format: String,
    tag: StrategyTag,
    adapter_checksum: String,
    decoder_checksum: String,
    original_decoder_checksum: String,
    encoder_checksum: Option<String>,
}

/// Writes a bundle directory: manifest plus adapter/decoder (and optional
/// encoder) checkpoints.
pub fn export_bundle(bundle: &InferenceBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut adapter_extra = BTreeMap::new();
    adapter_extra.insert("variant".to_string(), bundle.adapter_cfg.variant.tag().to_string());
    adapter_extra.insert(
        "trained_against".to_string(),
        bundle.decoder_checksum.clone(),
    );
    adapter_extra.insert("embed_final_layer".to_string(), "linear".to_string());
    adapter_extra.insert("site0_input".to_string(), "raw-latent-4ch".to_string());
    crate::io::save_checkpoint(
        &dir.join("adapter.safetensors"),
        "adapter",
        &serde_json::to_string(&bundle.adapter_cfg)?,
        &adapter_extra,
        &bundle.adapter_tensors,
    )?;
    crate::io::save_checkpoint(
        &dir.join("decoder.safetensors"),
        "toy-decoder",
        &serde_json::to_string(&bundle.decoder_cfg)?,
        &BTreeMap::new(),
        &bundle.decoder_tensors,
    )?;
    let encoder_checksum = match &bundle.encoder_tensors {
        Some(t) => {
            crate::io::save_checkpoint(
                &dir.join("encoder.safetensors"),
                "toy-encoder",
                &serde_json::to_string(&bundle.decoder_cfg)?,
                &BTreeMap::new(),
                t,
            )?;
            Some(checksum_tensors(t)?)
        }
        None => None,
    };
    let manifest = BundleManifest {
        format: "wma-bundle-v1".to_string(),
        tag: bundle.tag,
        adapter_checksum: bundle.adapter_checksum.clone(),
        decoder_checksum: bundle.decoder_checksum.clone(),
        original_decoder_checksum: bundle.original_decoder_checksum.clone(),
        encoder_checksum,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Loads and integrity-checks a bundle directory.
pub fn load_bundle(dir: &Path, device: &Device) -> Result<InferenceBundle> {
    let manifest_path = dir.join("manifest.json");
    let manifest: BundleManifest = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Checkpoint(format!("read {}: {e}", manifest_path.display())))?,
    )?;
    if manifest.format != "wma-bundle-v1" {
        return Err(Error::Checkpoint(format!(
            "unsupported bundle format {:?}",
            manifest.format
        )));
    }
    let adapter_ck = crate::io::load_checkpoint(&dir.join("adapter.safetensors"), device)?;
    let decoder_ck = crate::io::load_checkpoint(&dir.join("decoder.safetensors"), device)?;
    if adapter_ck.checksum != manifest.adapter_checksum {
        return Err(Error::Integrity(format!(
            "bundle adapter checksum mismatch in {}",
            dir.display()
        )));
    }
    if decoder_ck.checksum != manifest.decoder_checksum {
        return Err(Error::Integrity(format!(
            "bundle decoder checksum mismatch in {}",
            dir.display()
        )));
    }
    // Tags B, F and I must ship the original decoder.
    if matches!(manifest.tag, StrategyTag::B | StrategyTag::F | StrategyTag::I)
        && manifest.decoder_checksum != manifest.original_decoder_checksum
    {
        return Err(Error::Integrity(format!(
            "bundle tag {} must reference the original decoder",
            manifest.tag
        )));
    }
    let encoder_tensors = {
        let path = dir.join("encoder.safetensors");
        if path.exists() {
            let ck = crate::io::load_checkpoint(&path, device)?;
            if let Some(expected) = &manifest.encoder_checksum {
                if &ck.checksum != expected {
                    return Err(Error::Integrity(format!(
                        "bundle encoder checksum mismatch in {}",
                        dir.display()
                    )));
                }
            }
            Some(ck.tensors)
        } else {
            None
        }
    };
    let adapter_cfg: AdapterConfig = serde_json::from_str(&adapter_ck.config_json)?;
    let decoder_cfg: DecoderConfig = serde_json::from_str(&decoder_ck.config_json)?;
    Ok(InferenceBundle {
        tag: manifest.tag,
        adapter_cfg,
        adapter_tensors: adapter_ck.tensors,
        decoder_cfg,
        decoder_tensors: decoder_ck.tensors,
        adapter_checksum: manifest.adapter_checksum,
        decoder_checksum: manifest.decoder_checksum,
        original_decoder_checksum: manifest.original_decoder_checksum,
        encoder_tensors,
    })
}

/// Convenience for CLI flows: bundle directory path helpers.
pub fn bundle_dir(out_dir: &Path, tag: StrategyTag) -> PathBuf {
    out_dir.join(format!("bundle-{tag}"))
}

use rand::Rng;
