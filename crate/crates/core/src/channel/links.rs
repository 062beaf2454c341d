use ndarray::{Array1, Array2};
use num_complex::Complex64;

use super::scenario::Scenario;
use super::steering::{geometric_angles, path_gain, steering_vector};
use super::types::{ArrayGeometry, ChannelRealization, PathSet, Position};
use crate::error::{Error, Result};

/// MU-RIS paths for an MU at `p_u`: the line-of-sight path first, then one
/// path per fixed scatterer. Scattered-path gains use the total two-hop length.
pub fn mu_ris_paths(scenario: &Scenario, p_u: &Position) -> Result<PathSet> {
    let lambda = scenario.wavelength_m();
    let n = scenario.mu_scatterers.len() + 1;
    let mut paths = PathSet {
        arrival_elev: Vec::with_capacity(n),
        arrival_azim: Vec::with_capacity(n),
        departure_elev: None,
        departure_azim: None,
        gains: Vec::with_capacity(n),
    };
    let (theta, phi) = geometric_angles(&scenario.p_r, p_u, &scenario.ris_normal)?;
    paths.arrival_elev.push(theta);
    paths.arrival_azim.push(phi);
    paths.gains.push(path_gain(p_u.distance(&scenario.p_r), lambda, 0.0)?);

    for s in &scenario.mu_scatterers {
        let (theta, phi) = geometric_angles(&scenario.p_r, &s.position, &scenario.ris_normal)?;
        let length = p_u.distance(&s.position) + s.position.distance(&scenario.p_r);
        paths.arrival_elev.push(theta);
        paths.arrival_azim.push(phi);
        paths.gains.push(path_gain(length, lambda, s.phase)?);
    }
    Ok(paths)
}

/// `Σ_p α_p a(θ_p, φ_p)` over the arrival angles of `paths`.
pub fn channel_from_paths(geometry: &ArrayGeometry, paths: &PathSet) -> Result<Array1<Complex64>> {
    paths.validate()?;
    let mut g = Array1::zeros(geometry.len());
    for p in 0..paths.count() {
        let a = steering_vector(geometry, paths.arrival_elev[p], paths.arrival_azim[p])?;
        g.scaled_add(paths.gains[p], &a);
    }
    Ok(g)
}

pub fn mu_ris_channel(scenario: &Scenario, p_u: &Position) -> Result<Array1<Complex64>> {
    channel_from_paths(&scenario.ris_geometry, &mu_ris_paths(scenario, p_u)?)
}

/// RIS-BS paths: arrival angles at the BS and departure angles at the RIS.
pub fn ris_bs_paths(scenario: &Scenario) -> Result<PathSet> {
    let lambda = scenario.wavelength_m();
    let n = scenario.bs_scatterers.len() + 1;
    let mut arrival_elev = Vec::with_capacity(n);
    let mut arrival_azim = Vec::with_capacity(n);
    let mut departure_elev = Vec::with_capacity(n);
    let mut departure_azim = Vec::with_capacity(n);
    let mut gains = Vec::with_capacity(n);

    let mut push = |via: &Position, length: f64, phase: f64| -> Result<()> {
        let (t_b, p_b) = geometric_angles(&scenario.p_b, via, &scenario.bs_normal)?;
        let target = if via == &scenario.p_r { &scenario.p_b } else { via };
        let (t_r, p_r) = geometric_angles(&scenario.p_r, target, &scenario.ris_normal)?;
        arrival_elev.push(t_b);
        arrival_azim.push(p_b);
        departure_elev.push(t_r);
        departure_azim.push(p_r);
        gains.push(path_gain(length, lambda, phase)?);
        Ok(())
    };
    push(&scenario.p_r, scenario.p_r.distance(&scenario.p_b), 0.0)?;
    for s in &scenario.bs_scatterers {
        let length = scenario.p_r.distance(&s.position) + s.position.distance(&scenario.p_b);
        push(&s.position, length, s.phase)?;
    }
    Ok(PathSet {
        arrival_elev,
        arrival_azim,
        departure_elev: Some(departure_elev),
        departure_azim: Some(departure_azim),
        gains,
    })
}

/// `Σ_j β_j a_B(θ_j, φ_j) a_R(ψ_j, ω_j)^H`.
pub fn ris_bs_channel_from_paths(
    bs: &ArrayGeometry,
    ris: &ArrayGeometry,
    paths: &PathSet,
) -> Result<Array2<Complex64>> {
    paths.validate()?;
    let (dep_elev, dep_azim) = match (&paths.departure_elev, &paths.departure_azim) {
        (Some(e), Some(a)) => (e, a),
        _ => return Err(Error::Domain("RIS-BS paths need departure angles".into())),
    };
    let mut h = Array2::zeros((bs.len(), ris.len()));
    for j in 0..paths.count() {
        let a_b = steering_vector(bs, paths.arrival_elev[j], paths.arrival_azim[j])?;
        let a_r = steering_vector(ris, dep_elev[j], dep_azim[j])?;
        let beta = paths.gains[j];
        for (m, &b) in a_b.iter().enumerate() {
            let scaled = beta * b;
            for (n, &r) in a_r.iter().enumerate() {
                h[(m, n)] += scaled * r.conj();
            }
        }
    }
    Ok(h)
}

/// Recomputes the RIS-BS channel from the scenario geometry.
pub fn ris_bs_channel(scenario: &Scenario) -> Result<Array2<Complex64>> {
    ris_bs_channel_from_paths(&scenario.bs_geometry, &scenario.ris_geometry, &ris_bs_paths(scenario)?)
}

pub fn channel_realization(scenario: &Scenario, p_u: &Position) -> Result<ChannelRealization> {
    Ok(ChannelRealization {
        g_ur: mu_ris_channel(scenario, p_u)?,
        h_rb: scenario.h_rb().clone(),
    })
}
