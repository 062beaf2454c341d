use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use super::types::PhaseShiftVector;
use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// Noiseless RIS signal `y_r = g_ur s`.
pub fn ris_received(g_ur: &Array1<Complex64>, s: Complex64) -> Array1<Complex64> {
    g_ur.mapv(|g| g * s)
}

/// `H_rb diag(ω) g_ur`, the effective cascaded channel seen by the BS.
pub fn cascaded_channel(
    h_rb: &Array2<Complex64>,
    omega: &PhaseShiftVector,
    g_ur: &Array1<Complex64>,
) -> Result<Array1<Complex64>> {
    let (_, n) = h_rb.dim();
    if omega.len() != n || g_ur.len() != n {
        return Err(Error::Shape(format!(
            "H_rb has {n} columns but ω has {} and g_ur has {} entries",
            omega.len(),
            g_ur.len()
        )));
    }
    let reflected: Array1<Complex64> = omega.as_array() * g_ur;
    Ok(h_rb.dot(&reflected))
}

/// BS signal `y = H_rb diag(ω) g_ur s + n` with circularly-symmetric Gaussian
/// noise of per-entry variance `noise_power_w`, drawn from `rng_seed`.
pub fn bs_received(
    h_rb: &Array2<Complex64>,
    omega: &PhaseShiftVector,
    g_ur: &Array1<Complex64>,
    s: Complex64,
    noise_power_w: f64,
    rng_seed: u64,
) -> Result<Array1<Complex64>> {
    if !(noise_power_w >= 0.0) || !noise_power_w.is_finite() {
        return Err(Error::Domain(format!("noise power must be >= 0, got {noise_power_w}")));
    }
    let mut y = cascaded_channel(h_rb, omega, g_ur)?.mapv(|v| v * s);
    if noise_power_w > 0.0 {
        let mut rng = rng_from_seed(rng_seed);
        let sd = (noise_power_w / 2.0).sqrt();
        for v in y.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *v += Complex64::new(re * sd, im * sd);
        }
    }
    Ok(y)
}

/// I.i.d. uniform phases on [0, 2π).
pub fn random_phase_shifts(n: usize, seed: u64) -> Result<PhaseShiftVector> {
    if n == 0 {
        return Err(Error::Domain("phase shift vector needs n > 0".into()));
    }
    let mut rng = rng_from_seed(seed);
    Ok(PhaseShiftVector::from_phases(
        (0..n).map(|_| 2.0 * PI * rng.random::<f64>()),
    ))
}

/// Post-combining SNR `‖H_rb diag(ω) g_ur‖² |s|² / σ²`.
pub fn received_snr(
    h_rb: &Array2<Complex64>,
    omega: &PhaseShiftVector,
    g_ur: &Array1<Complex64>,
    s: Complex64,
    sigma2: f64,
) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::Domain(format!("noise power must be > 0, got {sigma2}")));
    }
    let eff = cascaded_channel(h_rb, omega, g_ur)?;
    Ok(eff.iter().map(|v| v.norm_sqr()).sum::<f64>() * s.norm_sqr() / sigma2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn sample_channel() -> (Array2<Complex64>, Array1<Complex64>) {
        let h = Array2::from_shape_fn((3, 4), |(m, n)| c(m as f64 + 0.5, n as f64 - 1.0));
        let g = Array1::from_shape_fn(4, |n| c(0.3 * n as f64, 1.0 - 0.2 * n as f64));
        (h, g)
    }

    #[test]
    fn ris_signal_scaling() {
        let (_, g) = sample_channel();
        assert_eq!(ris_received(&g, c(1.0, 0.0)), g);
        assert!(ris_received(&g, c(0.0, 0.0)).iter().all(|v| v.norm() == 0.0));
        let n1: f64 = ris_received(&g, c(1.0, 0.0)).iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let n3: f64 = ris_received(&g, c(0.0, 3.0)).iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        assert_relative_eq!(n3, 3.0 * n1, max_relative = 1e-14);
    }

    #[test]
    fn scalar_degenerate_case() {
        let h = Array2::from_elem((1, 1), c(0.5, -0.2));
        let g = Array1::from_elem(1, c(1.5, 0.7));
        let omega = PhaseShiftVector::from_phases([0.9]);
        let s = c(2.0, 0.0);
        let y = bs_received(&h, &omega, &g, s, 0.0, 1).unwrap();
        let expected = c(0.5, -0.2) * c(1.5, 0.7) * Complex64::from_polar(1.0, 0.9) * s;
        assert!((y[0] - expected).norm() < 1e-15);
    }

    #[test]
    fn noiseless_matches_triple_loop() {
        let (h, g) = sample_channel();
        let omega = random_phase_shifts(4, 3).unwrap();
        let s = c(0.7, 0.1);
        let y = bs_received(&h, &omega, &g, s, 0.0, 99).unwrap();
        for m in 0..3 {
            let mut acc = c(0.0, 0.0);
            for n in 0..4 {
                for k in 0..4 {
                    let diag = if n == k { omega.as_array()[n] } else { c(0.0, 0.0) };
                    acc += h[(m, n)] * diag * g[k];
                }
            }
            assert!((y[m] - acc * s).norm() < 1e-12);
        }
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let (h, g) = sample_channel();
        let omega = PhaseShiftVector::ones(4);
        let a = bs_received(&h, &omega, &g, c(1.0, 0.0), 0.1, 42).unwrap();
        let b = bs_received(&h, &omega, &g, c(1.0, 0.0), 0.1, 42).unwrap();
        let d = bs_received(&h, &omega, &g, c(1.0, 0.0), 0.1, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, d);
        assert!(bs_received(&h, &omega, &g, c(1.0, 0.0), -1.0, 42).is_err());
    }

    #[test]
    fn noise_variance_matches_sigma2() {
        let h = Array2::from_elem((2, 1), c(1.0, 0.0));
        let g = Array1::from_elem(1, c(0.5, 0.5));
        let omega = PhaseShiftVector::ones(1);
        let sigma2 = 0.25;
        let clean = bs_received(&h, &omega, &g, c(1.0, 0.0), 0.0, 0).unwrap();
        let draws = 100_000;
        let mut acc = [0.0f64; 2];
        let mut mean = [c(0.0, 0.0); 2];
        for seed in 0..draws {
            let y = bs_received(&h, &omega, &g, c(1.0, 0.0), sigma2, seed).unwrap();
            for m in 0..2 {
                let e = y[m] - clean[m];
                acc[m] += e.norm_sqr();
                mean[m] += e;
            }
        }
        for m in 0..2 {
            let mu = mean[m] / draws as f64;
            let var = acc[m] / draws as f64 - mu.norm_sqr();
            assert!((var - sigma2).abs() / sigma2 < 0.02, "variance {var}");
        }
    }

    #[test]
    fn random_phases_unit_modulus_and_uniform() {
        let a = random_phase_shifts(64, 5).unwrap();
        assert_eq!(a, random_phase_shifts(64, 5).unwrap());
        assert_ne!(a, random_phase_shifts(64, 6).unwrap());
        assert!(a.as_array().iter().all(|w| (w.norm() - 1.0).abs() < 1e-12));
        assert!(random_phase_shifts(0, 1).is_err());

        let n = 100_000;
        let v = random_phase_shifts(n, 11).unwrap();
        let phases: Vec<f64> = v
            .as_array()
            .iter()
            .map(|w| w.arg().rem_euclid(2.0 * PI))
            .collect();
        let mean = phases.iter().sum::<f64>() / n as f64;
        // Uniform[0, 2π): sd = 2π/√12, standard error sd/√n.
        let se = 2.0 * PI / 12f64.sqrt() / (n as f64).sqrt();
        assert!((mean - PI).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn snr_direct_norm_and_scaling() {
        let (h, g) = sample_channel();
        let omega = random_phase_shifts(4, 8).unwrap();
        let s = c(0.0, 2.0);
        let snr = received_snr(&h, &omega, &g, s, 0.5).unwrap();
        let mut direct = 0.0;
        for m in 0..3 {
            let mut acc = c(0.0, 0.0);
            for n in 0..4 {
                acc += h[(m, n)] * omega.as_array()[n] * g[n];
            }
            direct += acc.norm_sqr();
        }
        assert_relative_eq!(snr, direct * 4.0 / 0.5, max_relative = 1e-12);
        let half = received_snr(&h, &omega, &g, s, 1.0).unwrap();
        assert_relative_eq!(half, snr / 2.0, max_relative = 1e-12);
        assert!(received_snr(&h, &omega, &g, s, 0.0).is_err());
    }
}
