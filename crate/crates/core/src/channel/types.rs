use std::f64::consts::PI;
use std::ops::Sub;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform planar array: `n_elev` rows along the vertical axis, `n_azim`
/// columns along the horizontal in-plane axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub n_elev: usize,
    pub n_azim: usize,
    pub spacing_m: f64,
    pub wavelength_m: f64,
}

impl ArrayGeometry {
    pub fn new(n_elev: usize, n_azim: usize, spacing_m: f64, wavelength_m: f64) -> Result<Self> {
        if n_elev == 0 || n_azim == 0 {
            return Err(Error::Domain("array dimensions must be positive".into()));
        }
        if !(spacing_m > 0.0 && spacing_m.is_finite()) {
            return Err(Error::Domain(format!("element spacing must be > 0, got {spacing_m}")));
        }
        if !(wavelength_m > 0.0 && wavelength_m.is_finite()) {
            return Err(Error::Domain(format!("wavelength must be > 0, got {wavelength_m}")));
        }
        Ok(Self {
            n_elev,
            n_azim,
            spacing_m,
            wavelength_m,
        })
    }

    /// Half-wavelength spaced array.
    pub fn half_wavelength(n_elev: usize, n_azim: usize, wavelength_m: f64) -> Result<Self> {
        Self::new(n_elev, n_azim, wavelength_m / 2.0, wavelength_m)
    }

    pub fn len(&self) -> usize {
        self.n_elev * self.n_azim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A point in the deployment, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (*self - *other).norm()
    }

    pub fn dot(&self, other: &Position) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(&self, other: &Position) -> Position {
        Position::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn scale(&self, k: f64) -> Position {
        Position::new(self.x * k, self.y * k, self.z * k)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl Sub for Position {
    type Output = Position;

    fn sub(self, rhs: Position) -> Position {
        Position::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl From<[f64; 3]> for Position {
    fn from(v: [f64; 3]) -> Self {
        Position::new(v[0], v[1], v[2])
    }
}

impl From<Position> for [f64; 3] {
    fn from(p: Position) -> Self {
        p.to_array()
    }
}

/// Multipath description of one link. Departure angles are only present for
/// the RIS-BS link, where the RIS acts as the transmitting array.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub arrival_elev: Vec<f64>,
    pub arrival_azim: Vec<f64>,
    pub departure_elev: Option<Vec<f64>>,
    pub departure_azim: Option<Vec<f64>>,
    pub gains: Vec<Complex64>,
}

impl PathSet {
    pub fn count(&self) -> usize {
        self.gains.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.gains.len();
        if n == 0 {
            return Err(Error::Domain("a path set needs at least one path".into()));
        }
        let mut lists = vec![&self.arrival_elev, &self.arrival_azim];
        if let Some(d) = &self.departure_elev {
            lists.push(d);
        }
        if let Some(d) = &self.departure_azim {
            lists.push(d);
        }
        if self.departure_elev.is_some() != self.departure_azim.is_some() {
            return Err(Error::Domain("departure angles must come in (elev, azim) pairs".into()));
        }
        for list in lists {
            if list.len() != n {
                return Err(Error::Shape(format!(
                    "path angle list has {} entries, expected {n}",
                    list.len()
                )));
            }
            for &a in list.iter() {
                check_angle(a)?;
            }
        }
        Ok(())
    }

    /// Same geometry, gains multiplied by `k`.
    pub fn scaled(&self, k: Complex64) -> PathSet {
        PathSet {
            gains: self.gains.iter().map(|g| g * k).collect(),
            ..self.clone()
        }
    }
}

/// Channel realization for one MU position.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    /// MU to RIS channel, length N.
    pub g_ur: Array1<Complex64>,
    /// RIS to BS channel, M x N.
    pub h_rb: Array2<Complex64>,
}

/// RIS reflection coefficients; every entry has unit modulus.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseShiftVector(Array1<Complex64>);

impl PhaseShiftVector {
    pub const MODULUS_TOLERANCE: f64 = 1e-12;

    pub fn from_phases(phases: impl IntoIterator<Item = f64>) -> Self {
        PhaseShiftVector(phases.into_iter().map(|p| Complex64::from_polar(1.0, p)).collect())
    }

    pub fn ones(n: usize) -> Self {
        PhaseShiftVector(Array1::from_elem(n, Complex64::new(1.0, 0.0)))
    }

    pub fn new(omega: Array1<Complex64>) -> Result<Self> {
        for (n, w) in omega.iter().enumerate() {
            if (w.norm() - 1.0).abs() > Self::MODULUS_TOLERANCE {
                return Err(Error::Domain(format!(
                    "phase shift {n} has modulus {}, expected 1",
                    w.norm()
                )));
            }
        }
        Ok(PhaseShiftVector(omega))
    }

    pub fn as_array(&self) -> &Array1<Complex64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Rejects angles outside the half-open interval (0, π].
pub fn check_angle(a: f64) -> Result<()> {
    if a > 0.0 && a <= PI {
        Ok(())
    } else {
        Err(Error::Domain(format!("angle {a} outside (0, π]")))
    }
}
