//! NMSE sweeps over SNR and antenna count, classical baselines on the same
//! test cells, and analytic complexity reports.

use std::time::Instant;

use diffcore::ParamStore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classical::{empirical_covariance, lmmse_estimate, ls_estimate, switched_measure_channel, CovarianceModel, SwitchingSchedule};
use crate::config::ExperimentConfig;
use crate::error::{PassError, Result};
use crate::model::{Estimator, ModelConfig};
use crate::pilots::{generate_sample, noise_variance, stream, SnrPolicy};
use crate::scene::SystemConfig;
use crate::seed::derive_seed;
use crate::trainer::{cell_seed, zero_shot_eval, MetricsRow, NmseSummary};

/// Classical estimator under the identity switching schedule, one PA per
/// slot, so it spends `N` pilot slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Ls,
    Lmmse,
}

impl Baseline {
    pub fn id(&self) -> &'static str {
        match self {
            Baseline::Ls => "ls",
            Baseline::Lmmse => "lmmse",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        match id {
            "ls" => Some(Baseline::Ls),
            "lmmse" => Some(Baseline::Lmmse),
            _ => None,
        }
    }
}

/// Sub-stream of a cell seed reserved for the LMMSE prior samples.
const COVARIANCE_STREAM: u64 = u64::MAX;

/// Prior covariance for `n` antennas, estimated from channels independent of
/// the test records.
pub fn prior_covariance(cfg: &SystemConfig, n: usize, seed: u64, samples: usize) -> Result<CovarianceModel> {
    let cell = cfg.with_num_pas(n);
    let base = derive_seed(derive_seed(seed, n as u64), COVARIANCE_STREAM);
    let labels: Vec<_> = (0..samples.max(n) as u64)
        .into_par_iter()
        .map(|i| generate_sample(&cell, base, i, SnrPolicy::Fixed { snr_db: 0.0 }).map(|s| s.realization.h))
        .collect::<Result<_>>()?;
    empirical_covariance(&labels)
}

/// NMSE of a baseline on the test cell `(n, snr_db, seed)`. The channels are
/// those the neural estimators see in the same cell.
pub fn baseline_nmse(
    baseline: Baseline,
    cfg: &SystemConfig,
    n: usize,
    snr_db: f64,
    seed: u64,
    records: usize,
    cov: Option<&CovarianceModel>,
) -> Result<NmseSummary> {
    let cell = cfg.with_num_pas(n);
    let base = cell_seed(seed, n, snr_db);
    let sched = SwitchingSchedule::identity(n);
    let noise_var = noise_variance(snr_db);
    let cov = match (baseline, cov) {
        (Baseline::Lmmse, None) => {
            return Err(PassError::Config("the LMMSE baseline needs a prior covariance".into()));
        }
        (_, c) => c,
    };
    let parts: Vec<NmseSummary> = (0..records as u64)
        .into_par_iter()
        .map(|i| {
            let s = generate_sample(&cell, base, i, SnrPolicy::Fixed { snr_db })?;
            let (g, h) = (&s.realization.g, &s.realization.h);
            let y = switched_measure_channel(g, h, &sched, noise_var, derive_seed(s.record.seed, stream::SWITCHING))?;
            let est = match (baseline, cov) {
                (Baseline::Lmmse, Some(c)) => lmmse_estimate(&y, &sched, g, c, noise_var)?,
                _ => ls_estimate(&y, &sched, g)?,
            };
            let mut out = NmseSummary::default();
            out.push(
                est.iter().zip(h).map(|(a, b)| (a - b).norm_sqr()).sum(),
                h.iter().map(|v| v.norm_sqr()).sum(),
            );
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut total = NmseSummary::default();
    parts.into_iter().for_each(|p| total.merge(p));
    Ok(total)
}

/// One row per seed for a baseline at `(n, snr_db)`.
pub fn baseline_rows(
    baseline: Baseline,
    cfg: &SystemConfig,
    n: usize,
    snr_db: f64,
    seeds: &[u64],
    records: usize,
    covariance_samples: usize,
) -> Result<Vec<MetricsRow>> {
    seeds
        .iter()
        .map(|&seed| {
            let start = Instant::now();
            let cov = match baseline {
                Baseline::Lmmse => Some(prior_covariance(cfg, n, seed, covariance_samples)?),
                Baseline::Ls => None,
            };
            let nmse = baseline_nmse(baseline, cfg, n, snr_db, seed, records, cov.as_ref())?.value();
            Ok(MetricsRow {
                estimator: baseline.id().into(),
                n,
                t: n,
                snr_db,
                nmse: Some(nmse),
                flops: 0,
                params: 0,
                seed: Some(seed),
                wallclock_s: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    /// SNR grid at a fixed antenna count.
    Snr,
    /// Antenna-count grid at a fixed SNR.
    AntennaCount,
}

impl SweepKind {
    pub fn cells(&self, cfg: &ExperimentConfig) -> Vec<(usize, f64)> {
        let s = &cfg.sweep;
        match self {
            SweepKind::Snr => s.snr_grid_db.iter().map(|&snr| (s.fixed_n, snr)).collect(),
            SweepKind::AntennaCount => s.n_grid.iter().map(|&n| (n, s.fixed_snr_db)).collect(),
        }
    }
}

/// A trained estimator ready for evaluation.
pub struct TrainedModel {
    pub model: Box<dyn Estimator>,
    pub store: ParamStore,
}

impl TrainedModel {
    pub fn new(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        let model = config.build()?;
        model.check_store(&store)?;
        Ok(Self { model, store })
    }
}

/// Evaluate every configured estimator on every cell and seed, then append
/// one mean row per `(estimator, cell)`. Neural estimators are looked up in
/// `trained` by id; a cell beyond a model's capacity is a failed row.
pub fn run_sweep(cfg: &ExperimentConfig, kind: SweepKind, trained: &[TrainedModel]) -> Result<Vec<MetricsRow>> {
    let s = &cfg.sweep;
    let mut plan = Vec::new();
    for id in &s.estimators {
        match Baseline::from_id(id) {
            Some(b) => plan.push(Err(b)),
            None => {
                let wanted = cfg.model_config(id)?.id();
                let m = trained
                    .iter()
                    .find(|t| t.model.id() == wanted)
                    .ok_or_else(|| PassError::Config(format!("no checkpoint given for estimator {wanted}")))?;
                plan.push(Ok(m));
            }
        }
    }
    let mut rows = Vec::new();
    for (n, snr_db) in kind.cells(cfg) {
        for p in &plan {
            match p {
                Err(b) => rows.extend(baseline_rows(*b, &cfg.system, n, snr_db, &s.seeds, s.records_per_cell, s.covariance_samples)?),
                Ok(m) => rows.extend(zero_shot_eval(
                    m.model.as_ref(),
                    &m.store,
                    &cfg.system,
                    &[n],
                    snr_db,
                    &s.seeds,
                    s.records_per_cell,
                )?),
            }
        }
    }
    let means = mean_rows(&rows);
    rows.extend(means);
    Ok(rows)
}

/// Average over seeds of each `(estimator, N, T, snr)` group, in first-seen
/// order. A group with any failed row has a failed mean.
pub fn mean_rows(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    let mut out: Vec<(MetricsRow, usize)> = Vec::new();
    for r in rows.iter().filter(|r| r.seed.is_some()) {
        let key = |m: &MetricsRow| (m.estimator.clone(), m.n, m.t, m.snr_db.to_bits());
        match out.iter_mut().find(|(m, _)| key(m) == key(r)) {
            Some((m, count)) => {
                m.nmse = m.nmse.zip(r.nmse).map(|(a, b)| a + b);
                m.wallclock_s += r.wallclock_s;
                *count += 1;
            }
            None => out.push((MetricsRow { seed: None, ..r.clone() }, 1)),
        }
    }
    out.into_iter()
        .map(|(mut m, count)| {
            m.nmse = m.nmse.map(|v| v / count as f64);
            m
        })
        .collect()
}

/// Parameter count and per-`N` multiply-adds of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub model: String,
    pub params: usize,
    pub flops: Vec<(usize, u64)>,
}

pub fn count_flops(model: &ModelConfig, n: usize) -> Result<u64> {
    Ok(model.build()?.flops(n))
}

pub fn count_params(model: &ModelConfig) -> Result<usize> {
    Ok(model.build()?.num_params())
}

pub fn complexity_report(model: &ModelConfig, n_list: &[usize]) -> Result<ComplexityReport> {
    let m = model.build()?;
    Ok(ComplexityReport {
        model: m.id().into(),
        params: m.num_params(),
        flops: n_list.iter().map(|&n| (n, m.flops(n))).collect(),
    })
}
