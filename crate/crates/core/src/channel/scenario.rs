use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::links::{ris_bs_channel_from_paths, ris_bs_paths};
use super::types::{ArrayGeometry, Position};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed, stream};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub min: Position,
    pub max: Position,
}

impl Region {
    pub fn new(min: Position, max: Position) -> Result<Self> {
        let r = Region { min, max };
        r.validate()?;
        Ok(r)
    }

    /// x ∈ [5, 25], y ∈ [-10, 10], z ∈ [0.5, 2.5].
    pub fn default_sampling() -> Self {
        Region {
            min: Position::new(5.0, -10.0, 0.5),
            max: Position::new(25.0, 10.0, 2.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.min.to_array(), self.max.to_array());
        for axis in 0..3 {
            if !(lo[axis].is_finite() && hi[axis].is_finite()) || !(hi[axis] > lo[axis]) {
                return Err(Error::Domain(format!(
                    "degenerate region on axis {axis}: [{}, {}]",
                    lo[axis], hi[axis]
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &Position) -> bool {
        let (lo, hi, v) = (self.min.to_array(), self.max.to_array(), p.to_array());
        (0..3).all(|i| v[i] >= lo[i] && v[i] <= hi[i])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Position {
        let lo = self.min.to_array();
        let hi = self.max.to_array();
        let mut v = [0.0; 3];
        for i in 0..3 {
            v[i] = lo[i] + (hi[i] - lo[i]) * rng.random::<f64>();
        }
        v.into()
    }

    pub fn bounds(&self) -> [f64; 6] {
        [self.min.x, self.min.y, self.min.z, self.max.x, self.max.y, self.max.z]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayConfig {
    pub n_elev: usize,
    pub n_azim: usize,
    /// Defaults to half a wavelength.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing_m: Option<f64>,
    pub position: Position,
    /// Broadside direction; normalized on load.
    pub normal: Position,
}

/// The JSON scenario document. All distances in meters, angles in radians,
/// powers in dBm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub frequency_hz: f64,
    pub bs: ArrayConfig,
    pub ris: ArrayConfig,
    /// P: MU-RIS paths including the line-of-sight path.
    pub mu_paths: usize,
    /// J: RIS-BS paths including the line-of-sight path.
    pub bs_paths: usize,
    pub scatterer_box: Region,
    pub tx_power_dbm: f64,
    pub noise_power_dbm: f64,
    pub master_seed: u64,
}

impl ScenarioConfig {
    /// 90 GHz, 3x3 BS at (0, 10, 1.5), 10x10 RIS at (15, 0, 2), P = J = 10,
    /// 30 dBm transmit power, -94 dBm noise.
    pub fn reference() -> Self {
        let bs_pos = Position::new(0.0, 10.0, 1.5);
        let ris_pos = Position::new(15.0, 0.0, 2.0);
        let to_ris = ris_pos - bs_pos;
        ScenarioConfig {
            frequency_hz: 90e9,
            bs: ArrayConfig {
                n_elev: 3,
                n_azim: 3,
                spacing_m: None,
                position: bs_pos,
                normal: Position::new(to_ris.x, to_ris.y, 0.0),
            },
            ris: ArrayConfig {
                n_elev: 10,
                n_azim: 10,
                spacing_m: None,
                position: ris_pos,
                normal: Position::new(-1.0, 0.0, 0.0),
            },
            mu_paths: 10,
            bs_paths: 10,
            scatterer_box: Region {
                min: Position::new(0.0, -15.0, 0.0),
                max: Position::new(30.0, 15.0, 5.0),
            },
            tx_power_dbm: 30.0,
            noise_power_dbm: -94.0,
            master_seed: 2024,
        }
    }

    pub fn wavelength_m(&self) -> f64 {
        SPEED_OF_LIGHT / self.frequency_hz
    }

    /// Canonical serialization; the dataset header digest is taken over these bytes.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("scenario config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// A scatterer: fixed point plus a fixed phase offset applied to the path
/// through it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub position: Position,
    pub phase: f64,
}

/// Immutable world model: geometry, scatterers, pilot, noise level, and the
/// cached RIS-BS channel.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub bs_geometry: ArrayGeometry,
    pub ris_geometry: ArrayGeometry,
    pub p_b: Position,
    pub p_r: Position,
    pub bs_normal: Position,
    pub ris_normal: Position,
    pub mu_scatterers: Vec<Scatterer>,
    pub bs_scatterers: Vec<Scatterer>,
    pub pilot: Complex64,
    pub noise_power_w: f64,
    pub tx_power_w: f64,
    h_rb: Array2<Complex64>,
}

fn unit(v: Position, what: &str) -> Result<Position> {
    let n = v.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Config(format!("{what} must be a non-zero finite vector")));
    }
    Ok(v.scale(1.0 / n))
}

fn draw_scatterers(region: &Region, count: usize, seed: u64) -> Vec<Scatterer> {
    let mut rng = rng_from_seed(seed);
    (0..count)
        .map(|_| {
            let position = region.sample(&mut rng);
            let phase = 2.0 * PI * rng.random::<f64>();
            Scatterer { position, phase }
        })
        .collect()
}

impl Scenario {
    /// Builds the scenario, drawing P-1 and J-1 scatterers from `master_seed`.
    pub fn from_config(config: ScenarioConfig) -> Result<Self> {
        if config.mu_paths == 0 || config.bs_paths == 0 {
            return Err(Error::Config("path counts mu_paths and bs_paths must be >= 1".into()));
        }
        config.scatterer_box.validate()?;
        let mu = draw_scatterers(
            &config.scatterer_box,
            config.mu_paths - 1,
            derive_seed(config.master_seed, stream::MU_SCATTERERS),
        );
        let bs = draw_scatterers(
            &config.scatterer_box,
            config.bs_paths - 1,
            derive_seed(config.master_seed, stream::BS_SCATTERERS),
        );
        Self::with_scatterers(config, mu, bs)
    }

    /// Builds the scenario with explicit scatterers; the path counts in
    /// `config` are overwritten to match.
    pub fn with_scatterers(
        mut config: ScenarioConfig,
        mu_scatterers: Vec<Scatterer>,
        bs_scatterers: Vec<Scatterer>,
    ) -> Result<Self> {
        if !(config.frequency_hz > 0.0) || !config.frequency_hz.is_finite() {
            return Err(Error::Config(format!("frequency_hz must be > 0, got {}", config.frequency_hz)));
        }
        if !config.tx_power_dbm.is_finite() || !config.noise_power_dbm.is_finite() {
            return Err(Error::Config("powers must be finite dBm values".into()));
        }
        config.mu_paths = mu_scatterers.len() + 1;
        config.bs_paths = bs_scatterers.len() + 1;
        let wavelength = config.wavelength_m();
        let geometry = |a: &ArrayConfig| {
            ArrayGeometry::new(a.n_elev, a.n_azim, a.spacing_m.unwrap_or(wavelength / 2.0), wavelength)
        };
        let bs_geometry = geometry(&config.bs)?;
        let ris_geometry = geometry(&config.ris)?;
        let bs_normal = unit(config.bs.normal, "bs.normal")?;
        let ris_normal = unit(config.ris.normal, "ris.normal")?;
        if !config.bs.position.is_finite() || !config.ris.position.is_finite() {
            return Err(Error::Config("array positions must be finite".into()));
        }
        let tx_power_w = dbm_to_watts(config.tx_power_dbm);
        let mut scenario = Scenario {
            bs_geometry,
            ris_geometry,
            p_b: config.bs.position,
            p_r: config.ris.position,
            bs_normal,
            ris_normal,
            mu_scatterers,
            bs_scatterers,
            pilot: Complex64::new(tx_power_w.sqrt(), 0.0),
            noise_power_w: dbm_to_watts(config.noise_power_dbm),
            tx_power_w,
            h_rb: Array2::zeros((0, 0)),
            config,
        };
        let paths = ris_bs_paths(&scenario)?;
        scenario.h_rb = ris_bs_channel_from_paths(&scenario.bs_geometry, &scenario.ris_geometry, &paths)?;
        Ok(scenario)
    }

    pub fn wavelength_m(&self) -> f64 {
        self.ris_geometry.wavelength_m
    }

    /// M: BS antennas.
    pub fn bs_len(&self) -> usize {
        self.bs_geometry.len()
    }

    /// N: RIS elements.
    pub fn ris_len(&self) -> usize {
        self.ris_geometry.len()
    }

    /// Cached RIS-BS channel.
    pub fn h_rb(&self) -> &Array2<Complex64> {
        &self.h_rb
    }

    pub fn with_noise_power_w(mut self, noise_power_w: f64) -> Self {
        self.noise_power_w = noise_power_w;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_scenario_dimensions() {
        let s = Scenario::from_config(ScenarioConfig::reference()).unwrap();
        assert_eq!(s.bs_len(), 9);
        assert_eq!(s.ris_len(), 100);
        assert_eq!(s.h_rb().dim(), (9, 100));
        assert_eq!(s.mu_scatterers.len(), 9);
        assert_eq!(s.bs_scatterers.len(), 9);
        // λ/2 at 90 GHz ≈ 1.67 mm
        assert!((s.ris_geometry.spacing_m - 1.67e-3).abs() < 1e-5);
        assert!((s.tx_power_w - 1.0).abs() < 1e-12);
        assert!((s.pilot.re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scatterers_depend_only_on_master_seed() {
        let a = Scenario::from_config(ScenarioConfig::reference()).unwrap();
        let b = Scenario::from_config(ScenarioConfig::reference()).unwrap();
        assert_eq!(a.mu_scatterers, b.mu_scatterers);
        assert_eq!(a.h_rb(), b.h_rb());
        let mut cfg = ScenarioConfig::reference();
        cfg.master_seed += 1;
        let c = Scenario::from_config(cfg).unwrap();
        assert_ne!(a.mu_scatterers, c.mu_scatterers);
        for s in &a.mu_scatterers {
            assert!(a.config.scatterer_box.contains(&s.position));
        }
    }

    #[test]
    fn json_round_trip_and_missing_key() {
        let cfg = ScenarioConfig::reference();
        let text = cfg.to_canonical_json();
        assert_eq!(ScenarioConfig::from_json(&text).unwrap(), cfg);
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("frequency_hz");
        let err = ScenarioConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("frequency_hz"), "{err}");
    }

    #[test]
    fn dbm_conversion() {
        assert!((dbm_to_watts(30.0) - 1.0).abs() < 1e-12);
        assert!((dbm_to_watts(0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn degenerate_region_rejected() {
        let p = Position::new(0.0, 0.0, 0.0);
        assert!(Region::new(p, Position::new(1.0, 1.0, 0.0)).is_err());
        assert!(Region::new(p, Position::new(1.0, 1.0, 1.0)).is_ok());
    }
}
