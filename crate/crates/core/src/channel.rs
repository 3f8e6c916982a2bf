//! In-waveguide channel and the near-field wireless channel between one UE
//! and the PAs: a Bernoulli-masked spherical-wavefront LoS part plus a
//! scatterer-based NLoS part.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PassError, Result};
use crate::scene::{CouplingMode, PinchingLayout, Position3D, SystemConfig, SPEED_OF_LIGHT};
use crate::seed::{derive_seed, rng};

pub type ComplexVector = Vec<Complex64>;

/// Path-gain constant of the free-space model, `4 pi f_c / c`.
pub fn eta(cfg: &SystemConfig) -> f64 {
    4.0 * PI * cfg.carrier_hz / SPEED_OF_LIGHT
}

/// Coupling amplitude of each of `n` PAs.
pub fn coupling_factors(mode: CouplingMode, n: usize) -> Vec<f64> {
    match mode {
        CouplingMode::UniformPower => vec![1.0 / (n as f64).sqrt(); n],
        CouplingMode::Unit => vec![1.0; n],
    }
}

/// Guided-wave phase from the feed point to each PA, scaled by its coupling
/// amplitude.
pub fn inwaveguide_channel(layout: &PinchingLayout, cfg: &SystemConfig) -> ComplexVector {
    let k = 2.0 * PI / cfg.guided_wavelength();
    let alpha = coupling_factors(cfg.coupling_mode, layout.len());
    layout
        .pa_x
        .iter()
        .zip(alpha)
        .map(|(&x, a)| Complex64::from_polar(a, -k * (x - cfg.feed_x).abs()))
        .collect()
}

fn spherical_term(cfg: &SystemConfig, distance: f64, what: &str) -> Result<Complex64> {
    if !(distance > 0.0) {
        return Err(PassError::Singularity(format!("zero {what} distance")));
    }
    let k = 2.0 * PI / cfg.wavelength();
    Ok(Complex64::from_polar(eta(cfg).sqrt() / distance, -k * distance))
}

/// Free-space spherical-wavefront LoS channel.
pub fn los_channel(layout: &PinchingLayout, ue: &Position3D, cfg: &SystemConfig) -> Result<ComplexVector> {
    layout
        .positions(cfg)
        .iter()
        .map(|p| spherical_term(cfg, ue.distance(p), "UE-PA"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScattererDraw {
    pub positions: Vec<Position3D>,
    /// Complex path gains, `CN(0, sigma_s^2)`.
    pub gains: Vec<Complex64>,
    /// Uniform random phases on `[0, 2 pi)`.
    pub phases: Vec<f64>,
}

impl ScattererDraw {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Circularly-symmetric complex Gaussian sample with total variance `var`.
pub(crate) fn complex_normal<R: Rng + ?Sized>(r: &mut R, var: f64) -> Complex64 {
    if var == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let n = Normal::new(0.0, (var / 2.0).sqrt()).expect("finite variance");
    Complex64::new(n.sample(r), n.sample(r))
}

/// Scatterers uniform over the box `[0, D_x] x [0, D_y] x [0, d]`.
pub fn sample_scatterers(cfg: &SystemConfig, seed: u64) -> ScattererDraw {
    let mut r = rng(seed);
    let mut draw = ScattererDraw {
        positions: Vec::with_capacity(cfg.num_scatterers),
        gains: Vec::with_capacity(cfg.num_scatterers),
        phases: Vec::with_capacity(cfg.num_scatterers),
    };
    for _ in 0..cfg.num_scatterers {
        draw.positions.push(Position3D::new(
            r.gen_range(0.0..=cfg.region_x),
            r.gen_range(0.0..=cfg.region_y),
            r.gen_range(0.0..=cfg.height),
        ));
        draw.gains.push(complex_normal(&mut r, cfg.sigma_s_sq));
        draw.phases.push(r.gen_range(0.0..2.0 * PI));
    }
    draw
}

/// Receive array response of the PAs to one scatterer.
pub fn scatterer_response(
    layout: &PinchingLayout,
    ue: &Position3D,
    scatterer: &Position3D,
    cfg: &SystemConfig,
) -> Result<ComplexVector> {
    let d_ks = ue.distance(scatterer);
    if !(d_ks > 0.0) {
        return Err(PassError::Singularity("zero UE-scatterer distance".into()));
    }
    layout
        .positions(cfg)
        .iter()
        .map(|p| Ok(spherical_term(cfg, scatterer.distance(p), "scatterer-PA")? / d_ks))
        .collect()
}

/// Scatterer-based NLoS channel. No scatterers yields the zero vector.
pub fn nlos_channel(
    layout: &PinchingLayout,
    ue: &Position3D,
    draw: &ScattererDraw,
    cfg: &SystemConfig,
) -> Result<ComplexVector> {
    let mut h = vec![Complex64::new(0.0, 0.0); layout.len()];
    if draw.is_empty() {
        return Ok(h);
    }
    let norm = (1.0 / draw.len() as f64).sqrt();
    for ((pos, &beta), &phase) in draw.positions.iter().zip(&draw.gains).zip(&draw.phases) {
        let a = scatterer_response(layout, ue, pos, cfg)?;
        let w = beta * Complex64::from_polar(norm, phase);
        for (hn, an) in h.iter_mut().zip(a) {
            *hn += w * an;
        }
    }
    Ok(h)
}

/// One draw of the complete channel for one UE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub g: ComplexVector,
    pub h: ComplexVector,
    pub h_los: ComplexVector,
    pub h_nlos: ComplexVector,
    pub los_mask: Vec<bool>,
    pub scatterers: ScattererDraw,
    pub layout: PinchingLayout,
    pub ue: Position3D,
}

impl ChannelRealization {
    /// `mask ⊙ h_los + h_nlos` from the stored parts.
    pub fn recompose(&self) -> ComplexVector {
        self.h_los
            .iter()
            .zip(&self.h_nlos)
            .zip(&self.los_mask)
            .map(|((l, n), &m)| if m { l + n } else { *n })
            .collect()
    }

    /// Noiseless waveguide output `g^T h`.
    pub fn effective_gain(&self) -> Complex64 {
        self.g.iter().zip(&self.h).map(|(g, h)| g * h).sum()
    }
}

/// Draw the LoS mask and scatterers and assemble the channel.
pub fn compose_channel(
    layout: &PinchingLayout,
    ue: &Position3D,
    cfg: &SystemConfig,
    seed: u64,
) -> Result<ChannelRealization> {
    let mask_dist = Bernoulli::new(cfg.p_los)
        .map_err(|e| PassError::Config(format!("p_los: {e}")))?;
    let mut r = rng(derive_seed(seed, 0));
    let los_mask: Vec<bool> = (0..layout.len()).map(|_| mask_dist.sample(&mut r)).collect();
    let scatterers = sample_scatterers(cfg, derive_seed(seed, 1));
    let g = inwaveguide_channel(layout, cfg);
    let h_los = los_channel(layout, ue, cfg)?;
    let h_nlos = nlos_channel(layout, ue, &scatterers, cfg)?;
    let mut real = ChannelRealization {
        g,
        h: Vec::new(),
        h_los,
        h_nlos,
        los_mask,
        scatterers,
        layout: layout.clone(),
        ue: *ue,
    };
    real.h = real.recompose();
    Ok(real)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::sample_layout;

    fn layout_at(_cfg: &SystemConfig, xs: &[f64]) -> PinchingLayout {
        PinchingLayout {
            pa_x: xs.to_vec(),
            grid_indices: (1..=xs.len()).collect(),
        }
    }

    #[test]
    fn pa_at_feed_point_has_zero_phase() {
        let cfg = SystemConfig {
            coupling_mode: CouplingMode::Unit,
            ..Default::default()
        };
        let g = inwaveguide_channel(&layout_at(&cfg, &[0.0]), &cfg);
        assert_eq!(g[0], Complex64::new(1.0, 0.0));
    }

    #[test]
    fn half_guided_wavelength_flips_sign() {
        let cfg = SystemConfig::default();
        let half = cfg.guided_wavelength() / 2.0;
        let g = inwaveguide_channel(&layout_at(&cfg, &[half, 2.0 * half]), &cfg);
        let alpha = 1.0 / 2f64.sqrt();
        assert!((g[0] - Complex64::new(-alpha, 0.0)).norm() < 1e-12);
        assert!((g[1] - Complex64::new(alpha, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn one_meter_phase_at_28_ghz() {
        // lambda = c / 28e9 = 0.010706873... m, lambda_g = lambda / 1.4
        // phase = -2 pi / lambda_g = -2 pi * 1.4 * 28e9 / c
        let cfg = SystemConfig::default();
        let g = inwaveguide_channel(&layout_at(&cfg, &[1.0]), &cfg);
        let lambda_g = (299_792_458.0 / 28e9) / 1.4;
        let phase = -2.0 * PI / lambda_g;
        assert!((phase - (-821.571_248_6)).abs() < 1e-6);
        let want = Complex64::from_polar(1.0, phase);
        assert!((g[0] - want).norm() < 1e-9);
    }

    #[test]
    fn uniform_power_coupling_conserves_power() {
        for n in [1usize, 3, 16, 33] {
            let a = coupling_factors(CouplingMode::UniformPower, n);
            assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn los_amplitude_follows_inverse_distance() {
        let cfg = SystemConfig::default();
        let layout = layout_at(&cfg, &[0.0]);
        let near = los_channel(&layout, &Position3D::new(0.0, 3.0, 1.0), &cfg).unwrap();
        let far = los_channel(&layout, &Position3D::new(0.0, 8.0, -1.0), &cfg).unwrap();
        // distances 5 and 10
        assert!((near[0].norm() / far[0].norm() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn los_directly_below_the_pa() {
        let cfg = SystemConfig::default();
        let h = los_channel(&layout_at(&cfg, &[0.0]), &Position3D::new(0.0, 0.0, 0.0), &cfg).unwrap();
        let want = (4.0 * PI * 28e9 / 299_792_458.0f64).sqrt() / 5.0;
        assert!((want - 6.851_782_87).abs() < 1e-8);
        assert!((h[0].norm() - want).abs() < 1e-12);
    }

    #[test]
    fn full_wavelength_phase_is_unity() {
        let cfg = SystemConfig::default();
        let lambda = cfg.wavelength();
        let ue = Position3D::new(0.0, 0.0, cfg.height - lambda);
        let h = los_channel(&layout_at(&cfg, &[0.0]), &ue, &cfg).unwrap();
        let unit = h[0] / h[0].norm();
        assert!((unit - Complex64::new(1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn zero_distance_is_a_singularity() {
        let cfg = SystemConfig::default();
        let ue = Position3D::new(1.0, 0.0, cfg.height);
        assert!(matches!(
            los_channel(&layout_at(&cfg, &[1.0]), &ue, &cfg),
            Err(PassError::Singularity(_))
        ));
    }

    #[test]
    fn no_scatterers_means_no_nlos() {
        let cfg = SystemConfig {
            num_scatterers: 0,
            ..Default::default()
        };
        let draw = sample_scatterers(&cfg, 1);
        assert!(draw.is_empty());
        let layout = sample_layout(&cfg, 1).unwrap();
        let h = nlos_channel(&layout, &Position3D::new(3.0, 4.0, 0.0), &draw, &cfg).unwrap();
        assert!(h.iter().all(|v| *v == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn zero_gains_mean_no_nlos() {
        let cfg = SystemConfig::default();
        let mut draw = sample_scatterers(&cfg, 1);
        draw.gains.iter_mut().for_each(|g| *g = Complex64::new(0.0, 0.0));
        let layout = sample_layout(&cfg, 1).unwrap();
        let h = nlos_channel(&layout, &Position3D::new(3.0, 4.0, 0.0), &draw, &cfg).unwrap();
        assert!(h.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn single_scatterer_matches_direct_evaluation() {
        let cfg = SystemConfig::default();
        let layout = sample_layout(&cfg.with_num_pas(5), 8).unwrap();
        let ue = Position3D::new(7.0, 12.0, 0.0);
        let s = Position3D::new(2.5, 3.0, 1.5);
        let draw = ScattererDraw {
            positions: vec![s],
            gains: vec![Complex64::new(1.0, 0.0)],
            phases: vec![0.0],
        };
        let h = nlos_channel(&layout, &ue, &draw, &cfg).unwrap();
        let c = 299_792_458.0;
        let sqrt_eta = (4.0 * PI * 28e9 / c as f64).sqrt();
        let lambda = c / 28e9;
        let d_ks = ((7.0f64 - 2.5).powi(2) + (12.0f64 - 3.0).powi(2) + 1.5f64.powi(2)).sqrt();
        for (n, &x) in layout.pa_x.iter().enumerate() {
            let d_sn = ((x - 2.5).powi(2) + 3.0f64.powi(2) + (5.0f64 - 1.5).powi(2)).sqrt();
            let arg = -2.0 * PI * d_sn / lambda;
            let mag = sqrt_eta / (d_ks * d_sn);
            let want = Complex64::new(mag * arg.cos(), mag * arg.sin());
            assert!((h[n] - want).norm() <= 1e-12 * want.norm());
        }
    }

    #[test]
    fn scatterer_gain_variance_and_phase_distribution() {
        let cfg = SystemConfig {
            num_scatterers: 10,
            sigma_s_sq: 2.0,
            ..Default::default()
        };
        let mut power = 0.0;
        let mut phases = Vec::new();
        for seed in 0..10_000 {
            let d = sample_scatterers(&cfg, seed);
            power += d.gains.iter().map(|g| g.norm_sqr()).sum::<f64>();
            if seed < 1000 {
                phases.extend(d.phases);
            }
        }
        let var = power / 100_000.0;
        assert!((var / 2.0 - 1.0).abs() < 0.02, "{var}");

        // one-sample Kolmogorov-Smirnov against U[0, 2 pi)
        phases.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = phases.len() as f64;
        let ks = phases
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let f = p / (2.0 * PI);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        let critical_1pct = 1.628 / n.sqrt();
        assert!(ks < critical_1pct, "{ks} vs {critical_1pct}");
    }

    #[test]
    fn scatterers_fill_the_service_volume() {
        let cfg = SystemConfig::default();
        for seed in 0..200 {
            for p in sample_scatterers(&cfg, seed).positions {
                assert!((0.0..=20.0).contains(&p.x) && (0.0..=20.0).contains(&p.y));
                assert!((0.0..=5.0).contains(&p.z));
            }
        }
    }

    #[test]
    fn blocked_los_leaves_only_nlos() {
        let cfg = SystemConfig {
            p_los: 0.0,
            ..Default::default()
        };
        let layout = sample_layout(&cfg, 4).unwrap();
        let r = compose_channel(&layout, &Position3D::new(4.0, 9.0, 0.0), &cfg, 11).unwrap();
        assert_eq!(r.h, r.h_nlos);
    }

    #[test]
    fn pure_free_space_is_the_los_channel() {
        let cfg = SystemConfig {
            p_los: 1.0,
            num_scatterers: 0,
            ..Default::default()
        };
        let layout = sample_layout(&cfg, 4).unwrap();
        let ue = Position3D::new(4.0, 9.0, 0.0);
        let r = compose_channel(&layout, &ue, &cfg, 11).unwrap();
        assert_eq!(r.h, los_channel(&layout, &ue, &cfg).unwrap());
    }

    #[test]
    fn los_mask_frequency_matches_p_los() {
        let cfg = SystemConfig {
            num_pas: 20,
            num_scatterers: 0,
            p_los: 0.3,
            ..Default::default()
        };
        let layout = sample_layout(&cfg, 4).unwrap();
        let ue = Position3D::new(4.0, 9.0, 0.0);
        let mut hits = 0usize;
        for seed in 0..5000 {
            let r = compose_channel(&layout, &ue, &cfg, seed).unwrap();
            hits += r.los_mask.iter().filter(|&&m| m).count();
        }
        let p = hits as f64 / 100_000.0;
        assert!((p - 0.3).abs() < 0.003, "{p}");
    }

    #[test]
    fn compose_is_pure_and_recomposable() {
        let cfg = SystemConfig::default();
        let layout = sample_layout(&cfg, 4).unwrap();
        let ue = Position3D::new(4.0, 9.0, 0.0);
        let a = compose_channel(&layout, &ue, &cfg, 5).unwrap();
        let b = compose_channel(&layout, &ue, &cfg, 5).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.recompose().iter().zip(&a.h) {
            assert!((x - y).norm() <= 1e-12 * y.norm().max(1e-300));
        }
    }

    #[test]
    fn moving_one_pa_changes_only_its_entries() {
        let cfg = SystemConfig::default();
        let ue = Position3D::new(4.0, 9.0, 0.0);
        let a = layout_at(&cfg, &[1.0, 2.0, 3.0]);
        let b = layout_at(&cfg, &[1.0, 2.5, 3.0]);
        let (ga, gb) = (inwaveguide_channel(&a, &cfg), inwaveguide_channel(&b, &cfg));
        let (la, lb) = (los_channel(&a, &ue, &cfg).unwrap(), los_channel(&b, &ue, &cfg).unwrap());
        for n in [0, 2] {
            assert_eq!(ga[n], gb[n]);
            assert_eq!(la[n], lb[n]);
        }
        assert_ne!(ga[1], gb[1]);
        assert_ne!(la[1], lb[1]);
    }
}
