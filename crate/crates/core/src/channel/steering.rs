use std::f64::consts::{FRAC_PI_2, PI};

use ndarray::Array1;
use num_complex::Complex64;

use super::types::{check_angle, ArrayGeometry, Position};
use crate::error::{Error, Result};

/// UPA response `a_e(θ) ⊗ a_a(θ, φ)`. Element `(k, l)` sits at flat index
/// `k * n_azim + l` (elevation is the slow axis) and equals
/// `exp(-j 2π d (k cos θ + l sin θ cos φ) / λ)`.
pub fn steering_vector(geometry: &ArrayGeometry, theta: f64, phi: f64) -> Result<Array1<Complex64>> {
    check_angle(theta)?;
    check_angle(phi)?;
    let scale = -2.0 * PI * geometry.spacing_m / geometry.wavelength_m;
    // cos x as sin(π/2 - x): exactly zero at broadside.
    let elev_step = scale * (FRAC_PI_2 - theta).sin();
    let azim_step = scale * theta.sin() * (FRAC_PI_2 - phi).sin();

    let elev: Vec<Complex64> = (0..geometry.n_elev)
        .map(|k| Complex64::from_polar(1.0, elev_step * k as f64))
        .collect();
    let azim: Vec<Complex64> = (0..geometry.n_azim)
        .map(|l| Complex64::from_polar(1.0, azim_step * l as f64))
        .collect();

    let mut out = Array1::zeros(geometry.len());
    for (k, e) in elev.iter().enumerate() {
        for (l, a) in azim.iter().enumerate() {
            out[k * geometry.n_azim + l] = e * a;
        }
    }
    Ok(out)
}

/// Elevation/azimuth of `target` as seen from an array located at `source`.
///
/// Arrays are vertical: elevation is measured from the global +z axis and
/// azimuth from the in-plane horizontal axis `z × normal`. Results are clamped
/// into (0, π]; a target straight above or below gets azimuth π/2.
pub fn geometric_angles(source: &Position, target: &Position, array_normal: &Position) -> Result<(f64, f64)> {
    let diff = *target - *source;
    let dist = diff.norm();
    if !(dist > 0.0) || !dist.is_finite() {
        return Err(Error::Domain("source and target coincide".into()));
    }
    let up = Position::new(0.0, 0.0, 1.0);
    let azim_axis = up.cross(array_normal);
    let azim_norm = azim_axis.norm();
    if !(azim_norm > 1e-12) {
        return Err(Error::Domain("array normal must not be vertical".into()));
    }
    let azim_axis = azim_axis.scale(1.0 / azim_norm);

    let dir = diff.scale(1.0 / dist);
    let theta = dir.z.clamp(-1.0, 1.0).acos();

    let horizontal = Position::new(dir.x, dir.y, 0.0);
    let h_norm = horizontal.norm();
    let phi = if h_norm < 1e-15 {
        PI / 2.0
    } else {
        (horizontal.dot(&azim_axis) / h_norm).clamp(-1.0, 1.0).acos()
    };
    Ok((clamp_angle(theta), clamp_angle(phi)))
}

/// Maps an angle in [0, π] into (0, π].
pub fn clamp_angle(a: f64) -> f64 {
    if a <= 0.0 {
        f64::MIN_POSITIVE
    } else {
        a.min(PI)
    }
}

/// Free-space amplitude `λ / (4π d)` carrying a fixed phase.
pub fn path_gain(distance_m: f64, wavelength_m: f64, phase_offset: f64) -> Result<Complex64> {
    if !(distance_m > 0.0) || !distance_m.is_finite() {
        return Err(Error::Domain(format!("path length must be > 0, got {distance_m}")));
    }
    Ok(Complex64::from_polar(
        wavelength_m / (4.0 * PI * distance_m),
        phase_offset,
    ))
}
