//! Antenna-switching baselines: each slot activates a subset of PAs so the
//! per-PA channel becomes identifiable, then LS or LMMSE inverts the stacked
//! system `y = A h + n`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{complex_normal, ChannelRealization, ComplexVector};
use crate::error::{PassError, Result};
use crate::seed::rng;

type CMatrix = DMatrix<Complex64>;

/// Relative threshold on the diagonal of R below which a column counts as
/// linearly dependent.
const RANK_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchingSchedule {
    n: usize,
    slots: Vec<Vec<bool>>,
}

impl SwitchingSchedule {
    pub fn new(n: usize, slots: Vec<Vec<bool>>) -> Result<Self> {
        if slots.is_empty() {
            return Err(PassError::Schedule("schedule has no slots".into()));
        }
        for (t, mask) in slots.iter().enumerate() {
            if mask.len() != n {
                return Err(PassError::Schedule(format!(
                    "slot {t} has {} mask bits for {n} PAs",
                    mask.len()
                )));
            }
            if !mask.iter().any(|&b| b) {
                return Err(PassError::Schedule(format!("slot {t} activates no PA")));
            }
        }
        Ok(Self { n, slots })
    }

    /// One PA per slot, `T_sw = N`.
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            slots: (0..n).map(|t| (0..n).map(|i| i == t).collect()).collect(),
        }
    }

    /// Every PA active in each of `t` slots.
    pub fn all_on(n: usize, t: usize) -> Self {
        Self { n, slots: vec![vec![true; n]; t.max(1)] }
    }

    pub fn num_pas(&self) -> usize {
        self.n
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[Vec<bool>] {
        &self.slots
    }

    pub fn is_identity(&self) -> bool {
        self.slots.len() == self.n && self.slots.iter().enumerate().all(|(t, m)| m.iter().enumerate().all(|(i, &b)| b == (i == t)))
    }

    /// Stacked system matrix: row `t` holds `g_n` on the active columns.
    pub fn system_matrix(&self, g: &[Complex64]) -> Result<CMatrix> {
        self.check_len(g.len())?;
        Ok(DMatrix::from_fn(self.slots.len(), self.n, |t, n| {
            if self.slots[t][n] {
                g[n]
            } else {
                Complex64::new(0.0, 0.0)
            }
        }))
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n == self.n {
            Ok(())
        } else {
            Err(PassError::Schedule(format!("schedule is for {} PAs, channel has {n}", self.n)))
        }
    }
}

/// Noisy per-slot waveguide outputs under the schedule.
pub fn switched_measure(real: &ChannelRealization, sched: &SwitchingSchedule, noise_var: f64, seed: u64) -> Result<ComplexVector> {
    switched_measure_channel(&real.g, &real.h, sched, noise_var, seed)
}

/// [`switched_measure`] for a channel given as waveguide and radio vectors.
pub fn switched_measure_channel(
    g: &[Complex64],
    h: &[Complex64],
    sched: &SwitchingSchedule,
    noise_var: f64,
    seed: u64,
) -> Result<ComplexVector> {
    sched.check_len(g.len())?;
    if h.len() != g.len() {
        return Err(PassError::Shape(format!("{} waveguide factors for {} channel entries", g.len(), h.len())));
    }
    let mut r = rng(seed);
    Ok(sched
        .slots
        .iter()
        .map(|mask| {
            let s: Complex64 = mask
                .iter()
                .zip(g.iter().zip(h))
                .filter(|(&on, _)| on)
                .map(|(_, (g, h))| g * h)
                .sum();
            s + complex_normal(&mut r, noise_var)
        })
        .collect())
}

/// Least-squares estimate of `h` from switched measurements.
pub fn ls_estimate(y: &[Complex64], sched: &SwitchingSchedule, g: &[Complex64]) -> Result<ComplexVector> {
    if y.len() != sched.num_slots() {
        return Err(PassError::Shape(format!(
            "{} measurements for a {}-slot schedule",
            y.len(),
            sched.num_slots()
        )));
    }
    sched.check_len(g.len())?;
    if sched.is_identity() {
        return y
            .iter()
            .zip(g)
            .enumerate()
            .map(|(n, (yn, gn))| {
                if gn.norm() == 0.0 {
                    Err(PassError::Singularity(format!("zero waveguide coefficient at PA {n}")))
                } else {
                    Ok(yn / gn)
                }
            })
            .collect();
    }

    let a = sched.system_matrix(g)?;
    let n = sched.num_pas();
    if a.nrows() < n {
        return Err(PassError::Estimation(format!(
            "{} slots cannot identify {n} unknowns",
            a.nrows()
        )));
    }
    let qr = a.qr();
    let r = qr.r();
    let scale = (0..n).map(|i| r[(i, i)].norm()).fold(0.0, f64::max);
    let deficient: Vec<usize> = (0..n).filter(|&i| r[(i, i)].norm() <= RANK_TOL * scale.max(f64::MIN_POSITIVE)).collect();
    if !deficient.is_empty() {
        return Err(PassError::Estimation(format!(
            "switching system is rank deficient in columns {deficient:?}"
        )));
    }
    let qty = qr.q().adjoint() * DVector::from_column_slice(y);
    let x = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| PassError::Estimation("triangular solve failed".into()))?;
    Ok(x.iter().copied().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSource {
    Empirical,
    Identity,
}

/// Channel covariance used by LMMSE.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceModel {
    r_h: CMatrix,
    source: CovarianceSource,
}

impl CovarianceModel {
    /// Validates that `r_h` is square, Hermitian to 1e-10 and positive
    /// semidefinite to `-1e-10 * max eigenvalue`.
    pub fn new(r_h: CMatrix, source: CovarianceSource) -> Result<Self> {
        if !r_h.is_square() {
            return Err(PassError::Shape(format!("covariance is {}x{}", r_h.nrows(), r_h.ncols())));
        }
        let scale = r_h.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1.0);
        let asym = (&r_h - r_h.adjoint()).iter().map(|v| v.norm()).fold(0.0, f64::max);
        if asym > 1e-10 * scale {
            return Err(PassError::Estimation(format!("covariance is not Hermitian (deviation {asym:e})")));
        }
        let eig = SymmetricEigen::new(r_h.clone()).eigenvalues;
        let max = eig.iter().copied().fold(0.0, f64::max);
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -1e-10 * max.max(f64::MIN_POSITIVE) {
            return Err(PassError::Estimation(format!("covariance has negative eigenvalue {min:e}")));
        }
        Ok(Self { r_h, source })
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, kappa: f64) -> Self {
        Self {
            r_h: CMatrix::identity(n, n) * Complex64::new(kappa, 0.0),
            source: CovarianceSource::Identity,
        }
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.r_h
    }

    pub fn source(&self) -> CovarianceSource {
        self.source
    }

    pub fn dim(&self) -> usize {
        self.r_h.nrows()
    }
}

/// `R A^H (A R A^H + noise_var I)^{-1} y`.
pub fn lmmse_estimate(
    y: &[Complex64],
    sched: &SwitchingSchedule,
    g: &[Complex64],
    cov: &CovarianceModel,
    noise_var: f64,
) -> Result<ComplexVector> {
    if !(noise_var >= 0.0) {
        return Err(PassError::Estimation(format!("noise variance {noise_var} is negative")));
    }
    if cov.dim() != sched.num_pas() {
        return Err(PassError::Shape(format!(
            "covariance is {0}x{0} for {1} PAs",
            cov.dim(),
            sched.num_pas()
        )));
    }
    if y.len() != sched.num_slots() {
        return Err(PassError::Shape(format!(
            "{} measurements for a {}-slot schedule",
            y.len(),
            sched.num_slots()
        )));
    }
    let a = sched.system_matrix(g)?;
    let ra = &cov.r_h * a.adjoint();
    let inner = &a * &ra + CMatrix::identity(a.nrows(), a.nrows()) * Complex64::new(noise_var, 0.0);
    let w = inner
        .lu()
        .solve(&DVector::from_column_slice(y))
        .filter(|w| w.iter().all(|v| v.re.is_finite() && v.im.is_finite()))
        .ok_or_else(|| PassError::Estimation("LMMSE inner matrix is singular".into()))?;
    Ok((ra * w).iter().copied().collect())
}

/// Second-moment matrix `E[h h^H]` of the labels, Hermitian-symmetrized with
/// eigenvalues floored at zero.
pub fn empirical_covariance<I>(labels: I) -> Result<CovarianceModel>
where
    I: IntoIterator,
    I::Item: AsRef<[Complex64]>,
{
    let mut acc: Option<CMatrix> = None;
    let mut count = 0usize;
    for h in labels {
        let h = DVector::from_column_slice(h.as_ref());
        let outer = &h * h.adjoint();
        match &mut acc {
            None => acc = Some(outer),
            Some(m) if m.nrows() == h.len() => *m += outer,
            Some(m) => {
                return Err(PassError::Shape(format!(
                    "label of length {} among labels of length {}",
                    h.len(),
                    m.nrows()
                )))
            }
        }
        count += 1;
    }
    let acc = acc.ok_or_else(|| PassError::Estimation("no samples for covariance".into()))?;
    let n = acc.nrows();
    if count < n {
        return Err(PassError::Estimation(format!(
            "{count} samples cannot estimate an {n}x{n} covariance"
        )));
    }
    let mean = acc / Complex64::new(count as f64, 0.0);
    let herm = (&mean + mean.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = SymmetricEigen::new(herm);
    let floored = eig.eigenvalues.map(|l| Complex64::new(l.max(0.0), 0.0));
    let r_h = &eig.eigenvectors * CMatrix::from_diagonal(&floored) * eig.eigenvectors.adjoint();
    let r_h = (&r_h + r_h.adjoint()) * Complex64::new(0.5, 0.0);
    Ok(CovarianceModel { r_h, source: CovarianceSource::Empirical })
}
