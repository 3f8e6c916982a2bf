//! Scenario geometry: service region, waveguide, discrete activation grid and
//! random placement of pinching antennas (PAs) and user equipments (UEs).

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PassError, Result};
use crate::seed::rng;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Rule for the per-PA coupling amplitude.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    /// `alpha_n = 1/sqrt(N)`: the waveguide power is split evenly.
    UniformPower,
    /// `alpha_n = 1`.
    Unit,
}

/// Full scenario description. Serialized field names follow the usual
/// symbols (`D_x`, `f_c`, `S_scat`, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    /// Region extent along x (m).
    #[serde(rename = "D_x")]
    pub region_x: f64,
    /// Region extent along y (m).
    #[serde(rename = "D_y")]
    pub region_y: f64,
    /// Waveguide height (m).
    #[serde(rename = "d")]
    pub height: f64,
    /// PA length, also the lower placement bound (m).
    #[serde(rename = "L")]
    pub pa_length: f64,
    /// Number of discrete activation positions.
    #[serde(rename = "Q")]
    pub grid_size: usize,
    /// Active PAs.
    #[serde(rename = "N")]
    pub num_pas: usize,
    /// UEs in the scene.
    #[serde(rename = "K")]
    pub num_ues: usize,
    /// Carrier frequency (Hz).
    #[serde(rename = "f_c")]
    pub carrier_hz: f64,
    /// Effective refractive index of the waveguide.
    #[serde(rename = "n_e")]
    pub refractive_index: f64,
    /// Scatterers per UE link.
    #[serde(rename = "S_scat")]
    pub num_scatterers: usize,
    /// Per-antenna LoS probability.
    pub p_los: f64,
    /// Scatterer gain variance.
    pub sigma_s_sq: f64,
    /// Pilot slots.
    #[serde(rename = "T")]
    pub pilot_slots: usize,
    /// Transmit SNR (dB) with unit pilot power.
    pub snr_db: f64,
    /// Waveguide feed point x-coordinate (m).
    pub feed_x: f64,
    pub coupling_mode: CouplingMode,
    pub seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            region_x: 20.0,
            region_y: 20.0,
            height: 5.0,
            pa_length: 0.1,
            grid_size: 200,
            num_pas: 16,
            num_ues: 4,
            carrier_hz: 28e9,
            refractive_index: 1.4,
            num_scatterers: 6,
            p_los: 0.8,
            sigma_s_sq: 1.0,
            pilot_slots: 4,
            snr_db: 0.0,
            feed_x: 0.0,
            coupling_mode: CouplingMode::UniformPower,
            seed: 0,
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(PassError::Config(msg));
        let finite = [
            ("D_x", self.region_x),
            ("D_y", self.region_y),
            ("d", self.height),
            ("L", self.pa_length),
            ("f_c", self.carrier_hz),
            ("n_e", self.refractive_index),
            ("p_los", self.p_los),
            ("sigma_s_sq", self.sigma_s_sq),
            ("feed_x", self.feed_x),
        ];
        if let Some((k, v)) = finite.iter().find(|(_, v)| !v.is_finite()) {
            return fail(format!("{k} must be finite, got {v}"));
        }
        if self.snr_db.is_nan() {
            return fail("snr_db must not be NaN".into());
        }
        if !(self.pa_length > 0.0 && self.pa_length < self.region_x) {
            return fail(format!(
                "need 0 < L < D_x, got L = {} and D_x = {}",
                self.pa_length, self.region_x
            ));
        }
        if self.region_y <= 0.0 {
            return fail(format!("D_y must be positive, got {}", self.region_y));
        }
        if self.grid_size < 2 {
            return fail(format!("Q must be at least 2, got {}", self.grid_size));
        }
        if self.num_pas < 1 || self.num_pas > self.grid_size {
            return fail(format!(
                "need 1 <= N <= Q, got N = {} and Q = {}",
                self.num_pas, self.grid_size
            ));
        }
        if self.num_ues < 1 {
            return fail("K must be at least 1".into());
        }
        if self.height <= 0.0 {
            return fail(format!("d must be positive, got {}", self.height));
        }
        if self.carrier_hz <= 0.0 {
            return fail(format!("f_c must be positive, got {}", self.carrier_hz));
        }
        if self.refractive_index < 1.0 {
            return fail(format!("n_e must be at least 1, got {}", self.refractive_index));
        }
        if self.pilot_slots < 1 {
            return fail("T must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.p_los) {
            return fail(format!("p_los must lie in [0, 1], got {}", self.p_los));
        }
        if self.sigma_s_sq < 0.0 {
            return fail(format!("sigma_s_sq must be non-negative, got {}", self.sigma_s_sq));
        }
        Ok(())
    }

    /// Free-space wavelength (m).
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    /// Guided wavelength inside the waveguide (m).
    pub fn guided_wavelength(&self) -> f64 {
        self.wavelength() / self.refractive_index
    }

    pub fn with_num_pas(&self, n: usize) -> Self {
        Self {
            num_pas: n,
            ..self.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PassError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Short stable digest of the serialized configuration.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Position3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position3D {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &Position3D) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2)).sqrt()
    }
}

/// Active PAs on the waveguide, sorted by position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinchingLayout {
    /// x-coordinate of each PA (m); the PA sits at `(x, 0, d)`.
    pub pa_x: Vec<f64>,
    /// 1-based grid index of each PA.
    pub grid_indices: Vec<usize>,
}

impl PinchingLayout {
    pub fn len(&self) -> usize {
        self.pa_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pa_x.is_empty()
    }

    pub fn positions(&self, cfg: &SystemConfig) -> Vec<Position3D> {
        self.pa_x
            .iter()
            .map(|&x| Position3D::new(x, 0.0, cfg.height))
            .collect()
    }

    /// Layout from explicit grid indices (1-based).
    pub fn from_indices(cfg: &SystemConfig, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(PassError::Config("two PAs share a grid point".into()));
        }
        if let Some(bad) = indices.iter().find(|&&q| q < 1 || q > cfg.grid_size) {
            return Err(PassError::Config(format!(
                "grid index {bad} outside 1..={}",
                cfg.grid_size
            )));
        }
        Ok(Self {
            pa_x: indices.iter().map(|&q| grid_position(cfg, q)).collect(),
            grid_indices: indices,
        })
    }

    /// Recover a layout from coordinates that lie on the activation grid.
    pub fn from_coordinates(cfg: &SystemConfig, pa_x: &[f64]) -> Result<Self> {
        let step = (cfg.region_x - cfg.pa_length) / (cfg.grid_size - 1) as f64;
        let mut indices = Vec::with_capacity(pa_x.len());
        for &x in pa_x {
            let q = ((x - cfg.pa_length) / step).round() as i64 + 1;
            let on_grid = q >= 1
                && q as usize <= cfg.grid_size
                && (grid_position(cfg, q as usize) - x).abs() <= 1e-12 * cfg.region_x;
            if !on_grid {
                return Err(PassError::Config(format!(
                    "x = {x} is not a feasible activation position"
                )));
            }
            indices.push(q as usize);
        }
        Self::from_indices(cfg, indices)
    }
}

fn grid_position(cfg: &SystemConfig, q: usize) -> f64 {
    cfg.pa_length + (cfg.region_x - cfg.pa_length) * (q - 1) as f64 / (cfg.grid_size - 1) as f64
}

/// The `Q` discrete activation positions, from `L` to `D_x` inclusive.
pub fn feasible_positions(cfg: &SystemConfig) -> Result<Vec<f64>> {
    if cfg.grid_size < 2 {
        return Err(PassError::Config(format!("Q must be at least 2, got {}", cfg.grid_size)));
    }
    if !(cfg.pa_length > 0.0 && cfg.pa_length < cfg.region_x) {
        return Err(PassError::Config(format!(
            "need 0 < L < D_x, got L = {} and D_x = {}",
            cfg.pa_length, cfg.region_x
        )));
    }
    Ok((1..=cfg.grid_size).map(|q| grid_position(cfg, q)).collect())
}

/// `N` distinct grid points chosen uniformly at random, sorted ascending.
pub fn sample_layout(cfg: &SystemConfig, seed: u64) -> Result<PinchingLayout> {
    if cfg.num_pas > cfg.grid_size {
        return Err(PassError::Config(format!(
            "cannot place N = {} PAs on Q = {} grid points",
            cfg.num_pas, cfg.grid_size
        )));
    }
    feasible_positions(cfg)?;
    let mut r = rng(seed);
    let indices: Vec<usize> = sample(&mut r, cfg.grid_size, cfg.num_pas)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    PinchingLayout::from_indices(cfg, indices)
}

/// `K` UEs uniform on the `D_x x D_y` rectangle at ground level.
pub fn sample_ues(cfg: &SystemConfig, seed: u64) -> Result<Vec<Position3D>> {
    cfg.validate()?;
    let mut r = rng(seed);
    Ok((0..cfg.num_ues)
        .map(|_| {
            let x = r.gen_range(0.0..=cfg.region_x);
            let y = r.gen_range(0.0..=cfg.region_y);
            Position3D::new(x, y, 0.0)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_grid_is_the_endpoints() {
        let cfg = SystemConfig {
            grid_size: 2,
            num_pas: 1,
            ..Default::default()
        };
        assert_eq!(feasible_positions(&cfg).unwrap(), vec![0.1, 20.0]);
    }

    #[test]
    fn default_grid_spacing_is_a_tenth_of_a_meter() {
        let s = feasible_positions(&SystemConfig::default()).unwrap();
        assert_eq!(s.len(), 200);
        assert_eq!(s[0], 0.1);
        assert!((s[199] - 20.0).abs() < 1e-12);
        assert!((s[1] - 0.2).abs() < 1e-12);
        for w in s.windows(2) {
            assert!(((w[1] - w[0]) - 0.1).abs() < 1e-12 * 20.0);
        }
    }

    #[test]
    fn empty_interval_is_rejected() {
        let cfg = SystemConfig {
            pa_length: 20.0,
            ..Default::default()
        };
        assert!(matches!(feasible_positions(&cfg), Err(PassError::Config(_))));
    }

    #[test]
    fn full_layout_uses_every_grid_point() {
        let cfg = SystemConfig {
            grid_size: 10,
            num_pas: 10,
            ..Default::default()
        };
        let l = sample_layout(&cfg, 3).unwrap();
        assert_eq!(l.grid_indices, (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn too_many_pas_is_a_config_error() {
        let cfg = SystemConfig {
            grid_size: 10,
            num_pas: 11,
            ..Default::default()
        };
        assert!(matches!(sample_layout(&cfg, 0), Err(PassError::Config(_))));
    }

    #[test]
    fn single_pa_layout_is_repeatable() {
        let cfg = SystemConfig {
            num_pas: 1,
            ..Default::default()
        };
        assert_eq!(sample_layout(&cfg, 77).unwrap(), sample_layout(&cfg, 77).unwrap());
    }

    #[test]
    fn different_seeds_give_different_layouts() {
        let cfg = SystemConfig::default();
        assert_ne!(sample_layout(&cfg, 1).unwrap(), sample_layout(&cfg, 2).unwrap());
    }

    #[test]
    fn layout_round_trips_through_coordinates() {
        let cfg = SystemConfig::default();
        let l = sample_layout(&cfg, 9).unwrap();
        assert_eq!(PinchingLayout::from_coordinates(&cfg, &l.pa_x).unwrap(), l);
        assert!(PinchingLayout::from_coordinates(&cfg, &[0.15]).is_err());
    }

    #[test]
    fn ues_lie_on_the_ground_inside_the_region() {
        let cfg = SystemConfig::default();
        for seed in 0..2500 {
            for ue in sample_ues(&cfg, seed).unwrap() {
                assert_eq!(ue.z, 0.0);
                assert!((0.0..=20.0).contains(&ue.x) && (0.0..=20.0).contains(&ue.y));
            }
        }
    }

    #[test]
    fn ue_positions_have_the_uniform_mean() {
        let cfg = SystemConfig {
            num_ues: 10,
            ..Default::default()
        };
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for seed in 0..10_000 {
            for ue in sample_ues(&cfg, seed).unwrap() {
                sx += ue.x;
                sy += ue.y;
                n += 1.0;
            }
        }
        assert!((sx / n - 10.0).abs() < 0.1, "{}", sx / n);
        assert!((sy / n - 10.0).abs() < 0.1, "{}", sy / n);
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = SystemConfig::default();
        let text = cfg.to_toml();
        assert!(text.contains("D_x = 20.0"));
        assert!(text.contains("coupling_mode = \"uniform_power\""));
        assert_eq!(SystemConfig::from_toml(&text).unwrap(), cfg);
        let err = SystemConfig::from_toml(&format!("{text}\nbogus_key = 1\n")).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }
}
