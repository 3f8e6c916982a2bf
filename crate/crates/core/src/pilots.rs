//! Uplink pilot transmission through the waveguide, observation lifting and
//! dataset construction.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{complex_normal, compose_channel, inwaveguide_channel, ChannelRealization, ComplexVector};
use crate::error::{PassError, Result};
use crate::scene::{sample_layout, sample_ues, PinchingLayout, SystemConfig};
use crate::seed::{derive_seed, rng};

/// Noise power for a given SNR under unit pilot power.
pub fn noise_variance(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PilotObservation {
    pub y_tilde: ComplexVector,
    pub snr_db: f64,
    pub noise_var: f64,
}

/// `T` repeated slots of the scalar `g^T h` with additive `CN(0, noise_var)`.
pub fn observe(g: &[Complex64], h: &[Complex64], slots: usize, noise_var: f64, seed: u64) -> ComplexVector {
    let s: Complex64 = g.iter().zip(h).map(|(a, b)| a * b).sum();
    let mut r = rng(seed);
    (0..slots).map(|_| s + complex_normal(&mut r, noise_var)).collect()
}

/// Pilots from the observed UE at `cfg.snr_db`.
pub fn transmit_pilots(real: &ChannelRealization, cfg: &SystemConfig, seed: u64) -> PilotObservation {
    let noise_var = noise_variance(cfg.snr_db);
    PilotObservation {
        y_tilde: observe(&real.g, &real.h, cfg.pilot_slots, noise_var, seed),
        snr_db: cfg.snr_db,
        noise_var,
    }
}

/// Outer product `g y^T`, an `N x T` rank-one matrix.
pub fn lift_observation(obs: &PilotObservation, g: &[Complex64]) -> DMatrix<Complex64> {
    DMatrix::from_fn(g.len(), obs.y_tilde.len(), |n, t| g[n] * obs.y_tilde[t])
}

/// Dense row-major real matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RealMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
}

/// Split a complex `N x T` matrix into `N x 2T`: real parts in the first `T`
/// columns, imaginary parts in the last `T`.
pub fn to_real(m: &DMatrix<Complex64>) -> RealMatrix {
    let (n, t) = m.shape();
    let mut out = RealMatrix::zeros(n, 2 * t);
    for i in 0..n {
        for j in 0..t {
            out.set(i, j, m[(i, j)].re);
            out.set(i, t + j, m[(i, j)].im);
        }
    }
    out
}

pub fn from_real(m: &RealMatrix) -> Result<DMatrix<Complex64>> {
    if m.cols % 2 != 0 {
        return Err(PassError::Shape(format!("{} columns cannot split into re/im halves", m.cols)));
    }
    let t = m.cols / 2;
    Ok(DMatrix::from_fn(m.rows, t, |i, j| Complex64::new(m.get(i, j), m.get(i, t + j))))
}

/// Label layout `N x 2`: column 0 real, column 1 imaginary.
pub fn to_real_label(h: &[Complex64]) -> RealMatrix {
    RealMatrix {
        rows: h.len(),
        cols: 2,
        data: h.iter().flat_map(|v| [v.re, v.im]).collect(),
    }
}

pub fn from_real_label(m: &RealMatrix) -> Result<ComplexVector> {
    if m.cols != 2 {
        return Err(PassError::Shape(format!("label must have 2 columns, got {}", m.cols)));
    }
    Ok(m.data.chunks(2).map(|p| Complex64::new(p[0], p[1])).collect())
}

/// How the SNR of each generated record is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SnrPolicy {
    Fixed { snr_db: f64 },
    Uniform { min_db: f64, max_db: f64 },
}

impl SnrPolicy {
    pub fn training_default() -> Self {
        SnrPolicy::Uniform { min_db: -10.0, max_db: 20.0 }
    }

    fn draw(&self, seed: u64) -> f64 {
        match *self {
            SnrPolicy::Fixed { snr_db } => snr_db,
            SnrPolicy::Uniform { min_db, max_db } if min_db == max_db => min_db,
            SnrPolicy::Uniform { min_db, max_db } => rng(seed).gen_range(min_db..max_db),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SnrPolicy::Fixed { snr_db } if snr_db.is_finite() => Ok(()),
            SnrPolicy::Uniform { min_db, max_db } if min_db.is_finite() && max_db.is_finite() && min_db <= max_db => {
                Ok(())
            }
            other => Err(PassError::Config(format!("invalid SNR policy {other:?}"))),
        }
    }
}

/// One training or test sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub pa_x: Vec<f64>,
    /// Lifted observation, `N x 2T`.
    pub y_bar: RealMatrix,
    /// Channel label, `N x 2`.
    pub h_bar: RealMatrix,
    pub snr_db: f64,
    pub n: usize,
    pub t: usize,
    pub seed: u64,
}

impl DatasetRecord {
    pub fn channel(&self) -> ComplexVector {
        from_real_label(&self.h_bar).expect("label has two columns")
    }

    /// In-waveguide channel of this record's layout.
    pub fn waveguide(&self, cfg: &SystemConfig) -> ComplexVector {
        let layout = PinchingLayout {
            pa_x: self.pa_x.clone(),
            grid_indices: Vec::new(),
        };
        inwaveguide_channel(&layout, &cfg.with_num_pas(self.n))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_samples: usize,
    pub cfg: SystemConfig,
    pub format_version: u32,
    pub seed: u64,
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Sub-stream indices of a record seed.
pub mod stream {
    pub const LAYOUT: u64 = 0;
    pub const UE: u64 = 1;
    pub const CHANNEL: u64 = 2;
    pub const PILOTS: u64 = 3;
    pub const SNR: u64 = 4;
    pub const SWITCHING: u64 = 5;
}

/// Everything behind one record, kept for inspection and for baselines.
#[derive(Clone, Debug)]
pub struct Sample {
    pub record: DatasetRecord,
    pub realization: ChannelRealization,
    pub observation: PilotObservation,
}

/// Generate sample `index` of the dataset keyed by `base_seed`.
pub fn generate_sample(cfg: &SystemConfig, base_seed: u64, index: u64, snr: SnrPolicy) -> Result<Sample> {
    let seed = derive_seed(base_seed, index);
    let layout = sample_layout(cfg, derive_seed(seed, stream::LAYOUT))?;
    let ue = sample_ues(cfg, derive_seed(seed, stream::UE))?
        .into_iter()
        .next()
        .ok_or_else(|| PassError::Config("need at least one UE".into()))?;
    let realization = compose_channel(&layout, &ue, cfg, derive_seed(seed, stream::CHANNEL))?;
    let snr_db = snr.draw(derive_seed(seed, stream::SNR));
    let noise_var = noise_variance(snr_db);
    let observation = PilotObservation {
        y_tilde: observe(
            &realization.g,
            &realization.h,
            cfg.pilot_slots,
            noise_var,
            derive_seed(seed, stream::PILOTS),
        ),
        snr_db,
        noise_var,
    };
    let record = DatasetRecord {
        pa_x: layout.pa_x.clone(),
        y_bar: to_real(&lift_observation(&observation, &realization.g)),
        h_bar: to_real_label(&realization.h),
        snr_db,
        n: cfg.num_pas,
        t: cfg.pilot_slots,
        seed,
    };
    Ok(Sample { record, realization, observation })
}

/// Records `range` of the dataset, generated in parallel. The result does not
/// depend on the thread count.
pub fn generate_records(
    cfg: &SystemConfig,
    base_seed: u64,
    range: std::ops::Range<usize>,
    snr: SnrPolicy,
) -> Result<Vec<DatasetRecord>> {
    cfg.validate()?;
    snr.validate()?;
    range
        .into_par_iter()
        .map(|i| generate_sample(cfg, base_seed, i as u64, snr).map(|s| s.record))
        .collect()
}

pub fn build_dataset(
    cfg: &SystemConfig,
    num_samples: usize,
    base_seed: u64,
    snr: SnrPolicy,
) -> Result<(DatasetMeta, Vec<DatasetRecord>)> {
    if num_samples == 0 {
        return Err(PassError::Config("dataset needs at least one sample".into()));
    }
    let records = generate_records(cfg, base_seed, 0..num_samples, snr)?;
    let meta = DatasetMeta {
        num_samples,
        cfg: cfg.clone(),
        format_version: DATASET_FORMAT_VERSION,
        seed: base_seed,
    };
    Ok((meta, records))
}
