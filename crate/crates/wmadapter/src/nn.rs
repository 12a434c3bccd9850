//! Parameter construction, seeded initialization, and weight checksums.
//!
//! Modules are built through a [`Builder`] that either creates fresh seeded
//! variables in a `VarMap` (trainable), fetches variables already present
//! (trainable, loaded from a checkpoint), or fetches plain tensors (frozen:
//! no gradients are tracked through them).

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Conv2d, Conv2dConfig, Linear, VarMap};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

enum Source<'a> {
    Fresh {
        map: &'a VarMap,
        rng: Rc<RefCell<ChaCha8Rng>>,
    },
    Stored {
        map: &'a VarMap,
    },
    Frozen {
        tensors: &'a BTreeMap<String, Tensor>,
    },
}

pub struct Builder<'a> {
    source: Source<'a>,
    prefix: String,
    dtype: DType,
    device: Device,
}

#[derive(Clone, Copy)]
pub enum Init {
    Zeros,
    /// Uniform in `+-1/sqrt(fan_in)`.
    FanIn(usize),
}

impl<'a> Builder<'a> {
    /// Fresh seeded parameters registered into `map`.
    pub fn fresh(map: &'a VarMap, rng: ChaCha8Rng, dtype: DType, device: &Device) -> Self {
        Self {
            source: Source::Fresh {
                map,
                rng: Rc::new(RefCell::new(rng)),
            },
            prefix: String::new(),
            dtype,
            device: device.clone(),
        }
    }

    /// Looks up variables already present in `map` (e.g. loaded weights kept
    /// trainable).
    pub fn stored(map: &'a VarMap, dtype: DType, device: &Device) -> Self {
        Self {
            source: Source::Stored { map },
            prefix: String::new(),
            dtype,
            device: device.clone(),
        }
    }

    /// Plain tensors: the resulting module is frozen.
    pub fn frozen(tensors: &'a BTreeMap<String, Tensor>, dtype: DType, device: &Device) -> Self {
        Self {
            source: Source::Frozen { tensors },
            prefix: String::new(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn pp(&self, name: &str) -> Builder<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Builder {
            source: match &self.source {
                Source::Fresh { map, rng } => Source::Fresh {
                    map,
                    rng: Rc::clone(rng),
                },
                Source::Stored { map } => Source::Stored { map },
                Source::Frozen { tensors } => Source::Frozen { tensors },
            },
            prefix,
            dtype: self.dtype,
            device: self.device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn qualified(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.qualified(name);
        match &self.source {
            Source::Fresh { map, rng } => {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::FanIn(fan_in) => {
                        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                        let mut r = rng.borrow_mut();
                        (0..n).map(|_| r.gen_range(-bound..bound)).collect()
                    }
                };
                let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
                let var = Var::from_tensor(&t)?;
                let out = var.as_tensor().clone();
                let mut data_map = map.data().lock().unwrap();
                if data_map.contains_key(&full) {
                    return Err(Error::Config(format!("duplicate parameter name {full}")));
                }
                data_map.insert(full, var);
                Ok(out)
            }
            Source::Stored { map } => {
                let data_map = map.data().lock().unwrap();
                let var = data_map
                    .get(&full)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {full}")))?;
                let t = var.as_tensor().clone();
                drop(data_map);
                self.check_shape(&full, &t, shape)?;
                Ok(t)
            }
            Source::Frozen { tensors } => {
                let t = tensors
                    .get(&full)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {full}")))?
                    .clone();
                self.check_shape(&full, &t, shape)?;
                Ok(t.to_dtype(self.dtype)?)
            }
        }
    }

    fn check_shape(&self, name: &str, t: &Tensor, shape: &[usize]) -> Result<()> {
        if t.dims() != shape {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: expected shape {shape:?}, found {:?}",
                t.dims()
            )));
        }
        Ok(())
    }
}

pub fn conv2d(
    vb: &Builder,
    name: &str,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    cfg: Conv2dConfig,
    zero_init: bool,
) -> Result<Conv2d> {
    let vb = vb.pp(name);
    let fan_in = in_c * kernel * kernel;
    let (w_init, b_init) = if zero_init {
        (Init::Zeros, Init::Zeros)
    } else {
        (Init::FanIn(fan_in), Init::FanIn(fan_in))
    };
    let w = vb.get("weight", &[out_c, in_c, kernel, kernel], w_init)?;
    let b = vb.get("bias", &[out_c], b_init)?;
    Ok(Conv2d::new(w, Some(b), cfg))
}

pub fn linear(
    vb: &Builder,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    zero_init: bool,
) -> Result<Linear> {
    let vb = vb.pp(name);
    let (w_init, b_init) = if zero_init {
        (Init::Zeros, Init::Zeros)
    } else {
        (Init::FanIn(in_dim), Init::FanIn(in_dim))
    };
    let w = vb.get("weight", &[out_dim, in_dim], w_init)?;
    let b = vb.get("bias", &[out_dim], b_init)?;
    Ok(Linear::new(w, Some(b)))
}

pub fn conv_cfg(padding: usize, stride: usize) -> Conv2dConfig {
    Conv2dConfig {
        padding,
        stride,
        dilation: 1,
        groups: 1,
        cudnn_fwd_algo: None,
    }
}

/// Snapshot of a `VarMap` as plain named tensors, sorted by name.
pub fn varmap_tensors(map: &VarMap) -> BTreeMap<String, Tensor> {
    map.data()
        .lock()
        .unwrap()
        .iter()
        .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
        .collect()
}

/// SHA-256 over sorted (name, shape, little-endian f32 payload) records.
/// Stable across serialization round-trips; changes iff any weight changes.
pub fn checksum_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        hasher.update([0xff]);
        hasher.update((t.dims().len() as u64).to_le_bytes());
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        for v in data {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Number of scalar parameters in a tensor map.
pub fn count_params(tensors: &BTreeMap<String, Tensor>) -> usize {
    tensors.values().map(|t| t.elem_count()).sum()
}
