//! Contextual watermark adapter: six independent Fusers producing feature
//! residuals from (image feature, key) pairs, plus the non-contextual and
//! 3x3-kernel ablation variants.
//!
//! Each Fuser embeds the 48 message bits to a 48-dimensional vector with a
//! two-layer MLP (hidden width 256), broadcasts it across the feature map,
//! concatenates it with the image feature on the channel axis, and runs two
//! 1x1 convolutions (hidden width `c/2`, floor 2) to produce the residual.
//! The final convolution starts at zero so a fresh adapter is an exact
//! identity.

use std::collections::BTreeMap;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use candle_nn::ops::leaky_relu;
use candle_nn::{Conv2d, Linear, Module, VarMap};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{HookSite, HookedDecoder, InjectorSet};
use crate::error::{Error, Result};
use crate::images::{ImageBatch, LatentBatch};
use crate::keys::{keys_to_tensor, WatermarkKey, KEY_BITS};
use crate::nn::{checksum_tensors, conv2d, conv_cfg, linear, varmap_tensors, Builder};

pub const EMBED_HIDDEN: usize = 256;
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterVariant {
    Contextual,
    NonContextual,
    Conv3x3,
}

impl AdapterVariant {
    pub fn tag(self) -> &'static str {
        match self {
            AdapterVariant::Contextual => "contextual",
            AdapterVariant::NonContextual => "non-contextual",
            AdapterVariant::Conv3x3 => "conv3x3",
        }
    }

    fn fuse_kernel(self) -> usize {
        match self {
            AdapterVariant::Conv3x3 => 3,
            _ => 1,
        }
    }
}

impl FromStr for AdapterVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contextual" => Ok(AdapterVariant::Contextual),
            "non-contextual" | "noncontextual" => Ok(AdapterVariant::NonContextual),
            "conv3x3" => Ok(AdapterVariant::Conv3x3),
            other => Err(Error::Config(format!("unknown adapter variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuserSpec {
    pub channels: usize,
    pub bits: usize,
    pub embed_hidden: usize,
    pub fuse_hidden: usize,
}

impl FuserSpec {
    pub fn for_channels(channels: usize) -> Self {
        Self {
            channels,
            bits: KEY_BITS,
            embed_hidden: EMBED_HIDDEN,
            fuse_hidden: (channels / 2).max(2),
        }
    }
}

pub struct Fuser {
    spec: FuserSpec,
    variant: AdapterVariant,
    embed_fc1: Linear,
    embed_fc2: Linear,
    fuse_conv1: Conv2d,
    fuse_conv2: Conv2d,
}

impl Fuser {
    pub fn build(vb: &Builder, spec: FuserSpec, variant: AdapterVariant) -> Result<Self> {
        let embed_fc1 = linear(&vb.pp("embed"), "fc1", spec.bits, spec.embed_hidden, false)?;
        let embed_fc2 = linear(&vb.pp("embed"), "fc2", spec.embed_hidden, spec.bits, false)?;
        let k = variant.fuse_kernel();
        let pad = k / 2;
        let in_c = match variant {
            AdapterVariant::NonContextual => spec.bits,
            _ => spec.channels + spec.bits,
        };
        let fuse_conv1 = conv2d(
            &vb.pp("fuse"),
            "conv1",
            in_c,
            spec.fuse_hidden,
            k,
            conv_cfg(pad, 1),
            false,
        )?;
        // Zero-initialized so the residual starts as an exact identity.
        let fuse_conv2 = conv2d(
            &vb.pp("fuse"),
            "conv2",
            spec.fuse_hidden,
            spec.channels,
            k,
            conv_cfg(pad, 1),
            true,
        )?;
        Ok(Self {
            spec,
            variant,
            embed_fc1,
            embed_fc2,
            fuse_conv1,
            fuse_conv2,
        })
    }

    pub fn spec(&self) -> &FuserSpec {
        &self.spec
    }

    /// Maps keys to `(n, 48)` watermark feature vectors. Deterministic;
    /// differentiable with respect to the embedding weights.
    pub fn embed_bits(&self, keys: &[WatermarkKey], device: &Device) -> Result<Tensor> {
        let dtype = self.embed_fc1.weight().dtype();
        let x = keys_to_tensor(keys, dtype, device)?;
        let h = leaky_relu(&self.embed_fc1.forward(&x)?, LEAKY_SLOPE)?;
        // Final layer is linear; recorded in checkpoint metadata.
        Ok(self.embed_fc2.forward(&h)?)
    }

    /// Produces the feature residual for `f` of shape `(n, c, h, w)`.
    pub fn fuse(&self, f: &Tensor, keys: &[WatermarkKey]) -> Result<Tensor> {
        let (n, c, h, w) = f.dims4().map_err(|_| Error::Shape {
            context: "Fuser::fuse".to_string(),
            expected: "(n, c, h, w)".to_string(),
            actual: format!("{:?}", f.shape()),
        })?;
        if c != self.spec.channels {
            return Err(Error::Shape {
                context: "Fuser::fuse channels".to_string(),
                expected: format!("{}", self.spec.channels),
                actual: format!("{c}"),
            });
        }
        if keys.len() != n {
            return Err(Error::Shape {
                context: "Fuser::fuse keys".to_string(),
                expected: format!("{n} keys"),
                actual: format!("{}", keys.len()),
            });
        }
        let emb = self.embed_bits(keys, f.device())?;
        let map = emb
            .reshape((n, self.spec.bits, 1, 1))?
            .broadcast_as((n, self.spec.bits, h, w))?
            .contiguous()?;
        let input = match self.variant {
            AdapterVariant::NonContextual => map,
            _ => Tensor::cat(&[f, &map], 1)?,
        };
        let hidden = leaky_relu(&self.fuse_conv1.forward(&input)?, LEAKY_SLOPE)?;
        Ok(self.fuse_conv2.forward(&hidden)?)
    }

    /// Closed-form parameter count for a spec/variant pair.
    pub fn closed_form_params(spec: &FuserSpec, variant: AdapterVariant) -> usize {
        let b = spec.bits;
        let h = spec.embed_hidden;
        let fh = spec.fuse_hidden;
        let c = spec.channels;
        let embed = b * h + h + h * b + b;
        let k2 = variant.fuse_kernel() * variant.fuse_kernel();
        let in_c = match variant {
            AdapterVariant::NonContextual => b,
            _ => c + b,
        };
        let fuse = in_c * fh * k2 + fh + fh * c * k2 + c;
        embed + fuse
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub variant: AdapterVariant,
    pub site_channels: Vec<usize>,
}

/// The full adapter: one Fuser per hook site.
pub struct WmAdapter {
    variant: AdapterVariant,
    sites: Vec<HookSite>,
    fusers: Vec<Fuser>,
    tensors: BTreeMap<String, Tensor>,
    /// Checksum of the decoder this adapter was trained against, if any.
    pub trained_against: Option<String>,
}

impl WmAdapter {
    pub fn build(vb: &Builder, variant: AdapterVariant, sites: &[HookSite]) -> Result<Self> {
        let vb = vb.pp("adapter");
        let mut fusers = Vec::with_capacity(sites.len());
        for site in sites {
            let spec = FuserSpec::for_channels(site.channels);
            fusers.push(Fuser::build(
                &vb.pp(&format!("fuser{}", site.index)),
                spec,
                variant,
            )?);
        }
        Ok(Self {
            variant,
            sites: sites.to_vec(),
            fusers,
            tensors: BTreeMap::new(),
            trained_against: None,
        })
    }

    pub fn fresh(
        variant: AdapterVariant,
        sites: &[HookSite],
        map: &VarMap,
        rng: ChaCha8Rng,
        device: &Device,
    ) -> Result<Self> {
        let vb = Builder::fresh(map, rng, DType::F32, device);
        let mut adapter = Self::build(&vb, variant, sites)?;
        adapter.tensors = varmap_tensors(map)
            .into_iter()
            .filter(|(k, _)| k.starts_with("adapter."))
            .collect();
        Ok(adapter)
    }

    pub fn from_tensors(
        variant: AdapterVariant,
        sites: &[HookSite],
        tensors: &BTreeMap<String, Tensor>,
        trainable: Option<&VarMap>,
        device: &Device,
    ) -> Result<Self> {
        match trainable {
            None => {
                let vb = Builder::frozen(tensors, DType::F32, device);
                let mut adapter = Self::build(&vb, variant, sites)?;
                adapter.tensors = tensors
                    .iter()
                    .filter(|(k, _)| k.starts_with("adapter."))
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect();
                Ok(adapter)
            }
            Some(map) => {
                {
                    let mut data = map.data().lock().unwrap();
                    for (k, v) in tensors {
                        if k.starts_with("adapter.") {
                            data.insert(k.clone(), candle_core::Var::from_tensor(v)?);
                        }
                    }
                }
                let vb = Builder::stored(map, DType::F32, device);
                let mut adapter = Self::build(&vb, variant, sites)?;
                adapter.tensors = varmap_tensors(map)
                    .into_iter()
                    .filter(|(k, _)| k.starts_with("adapter."))
                    .collect();
                Ok(adapter)
            }
        }
    }

    pub fn variant(&self) -> AdapterVariant {
        self.variant
    }

    pub fn sites(&self) -> &[HookSite] {
        &self.sites
    }

    pub fn fusers(&self) -> &[Fuser] {
        &self.fusers
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn config(&self) -> AdapterConfig {
        AdapterConfig {
            variant: self.variant,
            site_channels: self.sites.iter().map(|s| s.channels).collect(),
        }
    }

    pub fn weights_checksum(&self) -> Result<String> {
        checksum_tensors(&self.tensors)
    }

    /// Actual parameter count, from the stored tensors.
    pub fn param_count(&self) -> usize {
        crate::nn::count_params(&self.tensors)
    }

    /// Closed-form count for a site profile.
    pub fn closed_form_params(site_channels: &[usize], variant: AdapterVariant) -> usize {
        site_channels
            .iter()
            .map(|&c| Fuser::closed_form_params(&FuserSpec::for_channels(c), variant))
            .sum()
    }

    fn check_sites(&self, decoder: &dyn HookedDecoder) -> Result<()> {
        let ours: Vec<(usize, usize)> = self.sites.iter().map(|s| (s.index, s.channels)).collect();
        let theirs: Vec<(usize, usize)> = decoder
            .sites()
            .iter()
            .map(|s| (s.index, s.channels))
            .collect();
        if ours != theirs {
            return Err(Error::SiteMismatch {
                adapter: ours,
                decoder: theirs,
            });
        }
        Ok(())
    }

    /// Injector set producing each fuser's residual for per-sample `keys`.
    pub fn injectors<'a>(&'a self, keys: &'a [WatermarkKey]) -> InjectorSet<'a> {
        let mut set = InjectorSet::new();
        for (site, fuser) in self.sites.iter().zip(self.fusers.iter()) {
            set.insert(site.index, move |f: &Tensor| fuser.fuse(f, keys));
        }
        set
    }

    /// Watermarked decode: equals `decoder.decode` with this adapter's
    /// residuals injected at every site. Warns (does not fail) when the
    /// decoder checksum differs from the one trained against, to permit
    /// zero-shot transfer between decoders.
    pub fn apply(
        &self,
        decoder: &dyn HookedDecoder,
        latents: &LatentBatch,
        keys: &[WatermarkKey],
    ) -> Result<ImageBatch> {
        self.check_sites(decoder)?;
        if let Some(expected) = &self.trained_against {
            let actual = decoder.weights_checksum()?;
            if &actual != expected {
                log::warn!(
                    "adapter was trained against decoder {} but is applied to {}; \
                     proceeding (zero-shot transfer)",
                    &expected[..16.min(expected.len())],
                    &actual[..16.min(actual.len())]
                );
            }
        }
        let injectors = self.injectors(keys);
        let out = decoder.decode_with(latents.tensor(), Some(&injectors))?;
        ImageBatch::new(out)
    }
}

/// Builds a fresh adapter of the requested variant for a site topology.
pub fn build_variant(
    tag: &str,
    sites: &[HookSite],
    map: &VarMap,
    rng: ChaCha8Rng,
    device: &Device,
) -> Result<WmAdapter> {
    let variant = AdapterVariant::from_str(tag)?;
    WmAdapter::fresh(variant, sites, map, rng, device)
}
