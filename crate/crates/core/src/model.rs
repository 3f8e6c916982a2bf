//! Common interface of the neural estimators and batch assembly from
//! dataset records.

use diffcore::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{PassError, Result};
use crate::nn::{build_store, layout, Batch, ParamSpec};
use crate::pamoe::{PaMoe, PaMoeConfig};
use crate::paformer::{PaFormer, PaFormerConfig};
use crate::pilots::DatasetRecord;

pub trait Estimator: Send + Sync {
    fn id(&self) -> &'static str;

    fn pilot_slots(&self) -> usize;

    /// Largest antenna count the model accepts, if bounded.
    fn capacity(&self) -> Option<usize>;

    fn param_specs(&self) -> Vec<ParamSpec>;

    /// `B x N x 1` positions and `B x N x 2T` pilots to `B x N x 2` channels.
    fn forward(&self, g: &mut Graph, store: &ParamStore, positions: Var, signals: Var) -> Result<Var>;

    /// Analytic matrix multiply-add count of one forward pass for one sample
    /// with `n` antennas.
    fn flops(&self, n: usize) -> u64;

    fn num_params(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    fn init_store(&self, seed: u64) -> Result<ParamStore> {
        build_store(&self.param_specs(), seed)
    }

    fn check_store(&self, store: &ParamStore) -> Result<()> {
        Ok(store.check_layout(&layout(&self.param_specs()))?)
    }

    fn check_antennas(&self, n: usize) -> Result<()> {
        match self.capacity() {
            Some(n_max) if n > n_max => Err(PassError::Capacity { n, n_max }),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id")]
pub enum ModelConfig {
    #[serde(rename = "pamoe-v1")]
    PaMoe(PaMoeConfig),
    #[serde(rename = "paformer-v1")]
    PaFormer(PaFormerConfig),
}

impl ModelConfig {
    pub const IDS: [&'static str; 2] = ["pamoe-v1", "paformer-v1"];

    pub fn id(&self) -> &'static str {
        match self {
            ModelConfig::PaMoe(_) => "pamoe-v1",
            ModelConfig::PaFormer(_) => "paformer-v1",
        }
    }

    pub fn build(&self) -> Result<Box<dyn Estimator>> {
        Ok(match self {
            ModelConfig::PaMoe(c) => Box::new(PaMoe::new(c.clone())?),
            ModelConfig::PaFormer(c) => Box::new(PaFormer::new(c.clone())?),
        })
    }

    /// Select a model by id from per-model configurations.
    pub fn from_id(id: &str, pamoe: &PaMoeConfig, paformer: &PaFormerConfig) -> Result<Self> {
        match id {
            "pamoe-v1" | "pamoe" => Ok(ModelConfig::PaMoe(pamoe.clone())),
            "paformer-v1" | "paformer" => Ok(ModelConfig::PaFormer(paformer.clone())),
            other => Err(PassError::Config(format!(
                "unknown model {other:?}; expected one of {:?}",
                Self::IDS
            ))),
        }
    }
}

/// Stack records with a common `N` and `T` into model inputs and labels.
pub fn make_batch(records: &[&DatasetRecord]) -> Result<(Batch, Tensor)> {
    let first = records
        .first()
        .ok_or_else(|| PassError::Shape("empty batch".into()))?;
    let (n, t) = (first.n, first.t);
    let b = records.len();
    let mut pos = Vec::with_capacity(b * n);
    let mut sig = Vec::with_capacity(b * n * 2 * t);
    let mut lab = Vec::with_capacity(b * n * 2);
    for r in records {
        if r.n != n || r.t != t {
            return Err(PassError::Shape(format!(
                "record with N = {}, T = {} in a batch of N = {n}, T = {t}",
                r.n, r.t
            )));
        }
        pos.extend_from_slice(&r.pa_x);
        sig.extend_from_slice(&r.y_bar.data);
        lab.extend_from_slice(&r.h_bar.data);
    }
    Ok((
        Batch {
            positions: Tensor::from_vec(vec![b, n, 1], pos)?,
            signals: Tensor::from_vec(vec![b, n, 2 * t], sig)?,
        },
        Tensor::from_vec(vec![b, n, 2], lab)?,
    ))
}

/// Forward a batch in a fresh graph and return the `B x N x 2` estimate.
pub fn infer(model: &dyn Estimator, store: &ParamStore, batch: &Batch) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = g.input(batch.positions.clone());
    let s = g.input(batch.signals.clone());
    let h = model.forward(&mut g, store, p, s)?;
    Ok(g.value(h).clone())
}
