use ndarray::{Array1, Array2};
use num_complex::Complex64;

use super::signal::cascaded_channel;
use super::types::PhaseShiftVector;
use crate::error::{Error, Result};

/// Outcome of [`optimize_phase_shifts`].
#[derive(Debug, Clone)]
pub struct PhaseOptimization {
    pub omega: PhaseShiftVector,
    /// `‖H diag(ω) g‖²` after initialization and after every iteration.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the effective channel vanishes; `omega` is then all ones.
    pub degenerate: bool,
}

impl PhaseOptimization {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().unwrap_or(&0.0)
    }
}

fn energy(v: &Array1<Complex64>) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum()
}

/// Maximizes `‖H_rb diag(ω) g_ur‖²` over unit-modulus ω by alternating
/// between the matched combiner `w = H diag(ω) g / ‖·‖` and the phase
/// alignment `ω_n = exp(-j arg((wᴴ H[:, n]) g_n))`. Both steps are exact
/// maximizers of their block, so the objective never decreases.
pub fn optimize_phase_shifts(
    h_rb: &Array2<Complex64>,
    g_ur: &Array1<Complex64>,
    max_iters: usize,
    tol: f64,
) -> Result<PhaseOptimization> {
    if max_iters == 0 {
        return Err(Error::Domain("max_iters must be >= 1".into()));
    }
    let (_, n) = h_rb.dim();
    let mut omega = PhaseShiftVector::ones(n);
    let mut eff = cascaded_channel(h_rb, &omega, g_ur)?;
    let mut objective = energy(&eff);
    let mut history = vec![objective];

    // All-ones gives zero: try the per-column energy as a fallback start.
    if !(objective > 0.0) {
        let degenerate = g_ur.iter().all(|g| g.norm_sqr() == 0.0) || h_rb.iter().all(|h| h.norm_sqr() == 0.0);
        if degenerate {
            return Ok(PhaseOptimization {
                omega,
                objective_history: history,
                iterations: 0,
                converged: false,
                degenerate: true,
            });
        }
        omega = PhaseShiftVector::from_phases((0..n).map(|k| 0.37 * k as f64));
        eff = cascaded_channel(h_rb, &omega, g_ur)?;
        objective = energy(&eff);
        history.push(objective);
    }

    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let norm = objective.sqrt();
        let w: Array1<Complex64> = eff.mapv(|v| v / norm);
        // wᴴ H[:, n] for every column
        let projected: Array1<Complex64> = h_rb.t().dot(&w.mapv(|v| v.conj()));
        let next = PhaseShiftVector::from_phases(
            projected.iter().zip(g_ur.iter()).map(|(p, g)| -(p * g).arg()),
        );
        let next_eff = cascaded_channel(h_rb, &next, g_ur)?;
        let next_obj = energy(&next_eff);
        let gain = (next_obj - objective) / objective;
        if next_obj >= objective {
            omega = next;
            eff = next_eff;
            objective = next_obj;
        }
        history.push(objective);
        if gain.abs() < tol {
            converged = true;
            break;
        }
    }
    Ok(PhaseOptimization {
        omega,
        objective_history: history,
        iterations,
        converged,
        degenerate: false,
    })
}
