//! Run configuration: a TOML file in which every field is addressable by
//! dotted path; CLI `--set path=value` overrides file values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterVariant;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::posthoc::PosthocConfig;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataCfg {
    /// Directory of images, or `synth:SEED:COUNT`.
    pub train: String,
    pub val: String,
    pub resolution: usize,
}

impl Default for DataCfg {
    fn default() -> Self {
        Self {
            train: "synth:11:384".to_string(),
            val: "synth:12:48".to_string(),
            resolution: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AutoencoderCfg {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for AutoencoderCfg {
    fn default() -> Self {
        Self {
            steps: 700,
            lr: 1.5e-3,
            batch: 4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Stage1Cfg {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub log_every: usize,
    /// Knowledge-transfer ablation: train the extractor from scratch
    /// alongside the adapter instead of freezing a pretrained one.
    pub trainable_extractor: bool,
    /// Attack augmentation inside adapter training. Off by default:
    /// robustness is inherited from the augmentation-pretrained extractor.
    pub augment: bool,
}

impl Default for Stage1Cfg {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            epochs: 2,
            batch: 4,
            log_every: 16,
            trainable_extractor: false,
            augment: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Stage2Cfg {
    pub lr: f64,
    pub steps: usize,
    pub warmup_steps: usize,
    pub batch: usize,
    pub strategy: String,
    pub schedule: String,
    pub log_every: usize,
}

impl Default for Stage2Cfg {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            steps: 2000,
            warmup_steps: 20,
            batch: 2,
            strategy: "hybrid".to_string(),
            schedule: "cosine".to_string(),
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimCfg {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimCfg {
    fn default() -> Self {
        Self {
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct ArtifactsCfg {
    /// Pre-existing checkpoint paths; empty strings mean "produce at run
    /// time" where a command supports it.
    pub decoder: String,
    pub encoder: String,
    pub extractor: String,
    pub wm_encoder: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub data: DataCfg,
    pub decoder: DecoderConfig,
    pub autoencoder: AutoencoderCfg,
    pub posthoc: PosthocConfig,
    pub adapter_variant: String,
    pub stage1: Stage1Cfg,
    pub stage2: Stage2Cfg,
    pub optim: OptimCfg,
    pub loss: LossWeights,
    pub perceptual_seed: u64,
    pub artifacts: ArtifactsCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            out_dir: "runs/exp".to_string(),
            data: DataCfg::default(),
            decoder: DecoderConfig::toy(),
            autoencoder: AutoencoderCfg::default(),
            posthoc: PosthocConfig::default(),
            adapter_variant: "contextual".to_string(),
            stage1: Stage1Cfg::default(),
            stage2: Stage2Cfg::default(),
            optim: OptimCfg::default(),
            loss: LossWeights::default(),
            perceptual_seed: 5,
            artifacts: ArtifactsCfg::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.loss.validate()?;
        self.adapter_variant.parse::<AdapterVariant>()?;
        if self.stage1.batch == 0 || self.stage2.batch == 0 {
            return Err(Error::Config("batch sizes must be positive".to_string()));
        }
        if self.data.resolution % self.decoder.upsampling_factor != 0 {
            return Err(Error::Config(format!(
                "resolution {} must be divisible by the upsampling factor {}",
                self.data.resolution, self.decoder.upsampling_factor
            )));
        }
        match self.stage2.schedule.as_str() {
            "cosine" | "constant" => {}
            other => {
                return Err(Error::Config(format!(
                    "unknown stage-2 schedule {other:?} (expected cosine or constant)"
                )))
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }
}

/// Loads a config file (TOML) and applies dotted-path overrides such as
/// `stage2.warmup_steps=5`. A missing path means defaults + overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut value: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("read {}: {e}", p.display())))?;
            text.parse::<toml::Value>()
                .map_err(|e| Error::Config(format!("parse {}: {e}", p.display())))?
        }
        None => toml::Value::Table(toml::map::Map::new()),
    };

    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override must be path=value, got {ov:?}")))?;
        set_dotted(&mut value, key.trim(), raw.trim())?;
    }

    // Layer the file/overrides over the defaults by merging tables.
    let defaults = toml::Value::try_from(RunConfig::default())
        .map_err(|e| Error::Config(format!("defaults: {e}")))?;
    let merged = merge(defaults, value);
    let cfg: RunConfig = merged
        .try_into()
        .map_err(|e| Error::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: toml::Value, over: toml::Value) -> toml::Value {
    match (base, over) {
        (toml::Value::Table(mut b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(existing) => merge(existing, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            toml::Value::Table(b)
        }
        (_, over) => over,
    }
}

fn set_dotted(root: &mut toml::Value, path: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override path {path:?}")));
    }
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{path:?}: not a table at {part:?}")))?;
        cur = table
            .entry((*part).to_string())
            .or_insert(toml::Value::Table(toml::map::Map::new()));
    }
    let leaf = parts[parts.len() - 1];
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("{path:?}: parent is not a table")))?;
    table.insert(leaf.to_string(), parse_literal(raw));
    Ok(())
}

/// Interprets an override literal: bool, integer, float, array (TOML
/// syntax), then string.
fn parse_literal(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    if raw.starts_with('[') {
        if let Ok(v) = format!("x = {raw}").parse::<toml::Value>() {
            if let Some(inner) = v.get("x") {
                return inner.clone();
            }
        }
    }
    toml::Value::String(raw.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_stated_schedules() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.stage1.lr, 5e-4);
        assert_eq!(cfg.stage1.epochs, 2);
        assert_eq!(cfg.stage2.lr, 5e-4);
        assert_eq!(cfg.stage2.steps, 2000);
        assert_eq!(cfg.stage2.warmup_steps, 20);
        assert_eq!(cfg.stage2.schedule, "cosine");
        assert_eq!(cfg.loss, LossWeights::default());
        assert_eq!(cfg.optim.weight_decay, 0.01);
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn file_values_and_overrides_layer_correctly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 5\n[stage2]\nsteps = 100\n[data]\nresolution = 32\n",
        )
        .unwrap();
        let cfg = load_config(
            Some(&path),
            &[
                "stage2.warmup_steps=3".to_string(),
                "loss.tv=0.05".to_string(),
                "adapter_variant=non-contextual".to_string(),
                "decoder.site_channels=[4, 32, 32, 32, 16, 8]".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.stage2.steps, 100);
        assert_eq!(cfg.stage2.warmup_steps, 3);
        assert_eq!(cfg.data.resolution, 32);
        assert_eq!(cfg.loss.tv, 0.05);
        assert_eq!(cfg.adapter_variant, "non-contextual");
        assert_eq!(cfg.decoder.site_channels, [4, 32, 32, 32, 16, 8]);
        // Untouched fields keep defaults.
        assert_eq!(cfg.stage1.lr, 5e-4);
    }

    #[test]
    fn every_field_reachable_by_dotted_path() {
        // Round-trip the default config through its own TOML: every leaf key
        // becomes an override and must produce the identical config.
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let value: toml::Value = text.parse().unwrap();
        let mut overrides = Vec::new();
        collect_leaves(&value, String::new(), &mut overrides);
        assert!(overrides.len() > 30, "expected many leaves, got {}", overrides.len());
        let rebuilt = load_config(None, &overrides).unwrap();
        assert_eq!(cfg, rebuilt);
    }

    fn collect_leaves(v: &toml::Value, prefix: String, out: &mut Vec<String>) {
        match v {
            toml::Value::Table(t) => {
                for (k, inner) in t {
                    let p = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    collect_leaves(inner, p, out);
                }
            }
            toml::Value::Array(_) => {
                out.push(format!("{prefix}={}", toml_inline(v)));
            }
            other => out.push(format!("{prefix}={}", toml_inline(other))),
        }
    }

    fn toml_inline(v: &toml::Value) -> String {
        match v {
            toml::Value::String(s) => s.clone(),
            toml::Value::Array(a) => {
                let items: Vec<String> = a.iter().map(toml_inline).collect();
                format!("[{}]", items.join(", "))
            }
            other => other.to_string(),
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(load_config(None, &["stage2.schedule=linear".to_string()]).is_err());
        assert!(load_config(None, &["adapter_variant=bogus".to_string()]).is_err());
        assert!(load_config(None, &["data.resolution=63".to_string()]).is_err());
        assert!(load_config(None, &["loss.mae=-1".to_string()]).is_err());
        assert!(load_config(None, &["junk".to_string()]).is_err());
    }
}
