//! Self-describing checkpoint container.
//!
//! One safetensors file per module; the header metadata carries the module
//! kind, its architecture config (JSON), a weights checksum, and free-form
//! extra fields. Loading verifies the checksum and refuses corrupt files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};
use crate::nn::checksum_tensors;

pub const FORMAT: &str = "wma-ckpt-v1";

#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config_json: String,
    pub checksum: String,
    pub extra: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    config_json: &str,
    extra: &BTreeMap<String, String>,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let checksum = checksum_tensors(tensors)?;
    let mut meta: HashMap<String, String> = HashMap::new();
    meta.insert("wma.format".to_string(), FORMAT.to_string());
    meta.insert("wma.kind".to_string(), kind.to_string());
    meta.insert("wma.config".to_string(), config_json.to_string());
    meta.insert("wma.checksum".to_string(), checksum);
    for (k, v) in extra {
        meta.insert(format!("wma.x.{k}"), v.clone());
    }

    let mut payloads: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let data = t
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        payloads.push((name.clone(), t.dims().to_vec(), bytes));
    }
    let views: Vec<(&str, TensorView)> = payloads
        .iter()
        .map(|(name, dims, bytes)| {
            let view = TensorView::new(Dtype::F32, dims.clone(), bytes)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            Ok((name.as_str(), view))
        })
        .collect::<Result<_>>()?;

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let blob = safetensors::serialize(views, Some(meta))
        .map_err(|e| Error::Checkpoint(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, blob)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let blob = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("read {}: {e}", path.display())))?;
    let st = SafeTensors::deserialize(&blob)
        .map_err(|e| Error::Checkpoint(format!("parse {}: {e}", path.display())))?;

    let (_, meta_block) = SafeTensors::read_metadata(&blob)
        .map_err(|e| Error::Checkpoint(format!("metadata {}: {e}", path.display())))?;
    let meta = meta_block.metadata().clone().unwrap_or_default();
    let field = |key: &str| -> Result<String> {
        meta.get(key)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing {key}", path.display())))
    };
    let format = field("wma.format")?;
    if format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format {format:?}",
            path.display()
        )));
    }

    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!(
                "{name}: unsupported dtype {:?}",
                view.dtype()
            )));
        }
        let data: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::from_vec(data, view.shape().to_vec(), device)?;
        tensors.insert(name.to_string(), t);
    }

    let stored = field("wma.checksum")?;
    let actual = checksum_tensors(&tensors)?;
    if stored != actual {
        return Err(Error::Integrity(format!(
            "{}: weights checksum mismatch (manifest {}, actual {})",
            path.display(),
            &stored[..16.min(stored.len())],
            &actual[..16]
        )));
    }

    let mut extra = BTreeMap::new();
    for (k, v) in &meta {
        if let Some(stripped) = k.strip_prefix("wma.x.") {
            extra.insert(stripped.to_string(), v.clone());
        }
    }

    Ok(Checkpoint {
        kind: field("wma.kind")?,
        config_json: field("wma.config")?,
        checksum: stored,
        extra,
        tensors,
    })
}
