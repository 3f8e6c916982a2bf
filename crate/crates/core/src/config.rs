//! Experiment configuration files and dotted command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::{PassError, Result};
use crate::model::ModelConfig;
use crate::paformer::PaFormerConfig;
use crate::pamoe::PaMoeConfig;
use crate::pilots::SnrPolicy;
use crate::scene::SystemConfig;
use crate::trainer::TrainConfig;

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub num_samples: usize,
    /// Per-record SNR range; equal bounds give a fixed-SNR dataset.
    pub snr_min_db: f64,
    pub snr_max_db: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { num_samples: 20_000, snr_min_db: -10.0, snr_max_db: 20.0 }
    }
}

impl GenerateConfig {
    pub fn snr_policy(&self) -> SnrPolicy {
        if self.snr_min_db == self.snr_max_db {
            SnrPolicy::Fixed { snr_db: self.snr_min_db }
        } else {
            SnrPolicy::Uniform { min_db: self.snr_min_db, max_db: self.snr_max_db }
        }
    }
}

/// Grids and estimators of the NMSE sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub snr_grid_db: Vec<f64>,
    /// Antenna count of the SNR sweep.
    pub fixed_n: usize,
    pub n_grid: Vec<usize>,
    /// SNR of the antenna-count sweep.
    pub fixed_snr_db: f64,
    pub seeds: Vec<u64>,
    pub records_per_cell: usize,
    /// Any of `ls`, `lmmse`, `pamoe-v1`, `paformer-v1`.
    pub estimators: Vec<String>,
    /// Channel draws used to estimate the LMMSE prior covariance.
    pub covariance_samples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            snr_grid_db: (-10..=20).step_by(5).map(f64::from).collect(),
            fixed_n: 16,
            n_grid: (8..=32).step_by(4).collect(),
            fixed_snr_db: 0.0,
            seeds: vec![0, 1, 2],
            records_per_cell: 2000,
            estimators: vec!["ls".into(), "lmmse".into()],
            covariance_samples: 2000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub train: TrainConfig,
    pub pamoe: PaMoeConfig,
    pub paformer: PaFormerConfig,
    pub generate: GenerateConfig,
    pub sweep: SweepConfig,
}

/// Override prefixes that address the system section.
const SYSTEM_ALIASES: [&str; 3] = ["scene", "channel", "pilots"];

impl ExperimentConfig {
    /// Read an optional TOML file, then apply `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| PassError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with(&base, overrides)
    }

    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let parsed: Self = toml::from_str(text).map_err(|e| PassError::Config(e.message().to_string()))?;
        let mut tree = Value::try_from(&parsed).map_err(|e| PassError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: Self = tree.try_into().map_err(|e: toml::de::Error| PassError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short stable digest of the full configuration.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.train.validate()?;
        self.model_config(&self.train.model)?.build()?;
        if self.generate.num_samples == 0 {
            return Err(PassError::Config("generate.num_samples must be at least 1".into()));
        }
        self.generate.snr_policy().validate()?;
        let s = &self.sweep;
        if s.seeds.is_empty() || s.records_per_cell == 0 {
            return Err(PassError::Config("sweep needs at least one seed and one record per cell".into()));
        }
        if s.snr_grid_db.iter().any(|v| !v.is_finite()) || s.n_grid.iter().any(|&n| n == 0) || s.fixed_n == 0 {
            return Err(PassError::Config("sweep grids need finite SNRs and positive antenna counts".into()));
        }
        Ok(())
    }

    /// Model configuration for `id`, with its pilot budget taken from the
    /// system section.
    pub fn model_config(&self, id: &str) -> Result<ModelConfig> {
        let t = self.system.pilot_slots;
        let pamoe = PaMoeConfig { pilot_slots: t, ..self.pamoe.clone() };
        let paformer = PaFormerConfig { pilot_slots: t, ..self.paformer.clone() };
        ModelConfig::from_id(id, &pamoe, &paformer)
    }
}

/// Set `section.key=value` in a configuration tree. `scene.`, `channel.` and
/// `pilots.` address the system section. The value is parsed as TOML and
/// falls back to a bare string; integers become floats where the existing
/// entry is a float.
pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PassError::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let mut parts: Vec<&str> = key.split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(PassError::Config(format!("override key {key:?} needs a section, e.g. system.p_los")));
    }
    if SYSTEM_ALIASES.contains(&parts[0]) {
        parts[0] = "system";
    }
    let mut value = parse_value(raw.trim());
    let (last, path) = parts.split_last().expect("at least two parts");
    let mut node = tree;
    for p in path {
        node = node
            .get_mut(*p)
            .ok_or_else(|| PassError::Config(format!("unknown configuration key {key:?}")))?;
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| PassError::Config(format!("{key:?} does not address a table entry")))?;
    let slot = table
        .get_mut(*last)
        .ok_or_else(|| PassError::Config(format!("unknown configuration key {key:?}")))?;
    coerce_like(slot, &mut value);
    *slot = value;
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn coerce_like(existing: &Value, value: &mut Value) {
    match (existing, &mut *value) {
        (Value::Float(_), Value::Integer(i)) => *value = Value::Float(*i as f64),
        (Value::Array(old), Value::Array(new)) => {
            if let Some(proto) = old.first() {
                new.iter_mut().for_each(|v| coerce_like(proto, v));
            }
        }
        _ => {}
    }
}
