use std::path::Path;

use num_complex::{Complex32, Complex64};
use rayon::prelude::*;

use super::format::{DatasetHeader, DatasetWriter, PhaseMode, SampleRecord};
use crate::channel::{
    bs_received, mu_ris_channel, optimize_phase_shifts, random_phase_shifts, ris_received, PhaseShiftVector,
    Position, Region, Scenario,
};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed, stream};

/// Iteration cap and tolerance of per-sample phase optimization.
pub const PHASE_OPT_MAX_ITERS: usize = 100;
pub const PHASE_OPT_TOL: f64 = 1e-10;

/// Seeds of one sample, all derived from `SHA-256(master ‖ index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleSeeds {
    pub sample: u64,
    pub position: u64,
    pub phases: u64,
    pub noise: u64,
}

impl SampleSeeds {
    pub fn new(master_seed: u64, index: u64) -> Self {
        let sample = derive_seed(master_seed, index);
        SampleSeeds {
            sample,
            position: derive_seed(sample, stream::SAMPLE_POSITION),
            phases: derive_seed(sample, stream::SAMPLE_PHASES),
            noise: derive_seed(sample, stream::SAMPLE_NOISE),
        }
    }
}

/// Dataset generation parameters.
#[derive(Debug, Clone)]
pub struct GenerationParams {
    pub region: Region,
    pub count: u64,
    pub phase_mode: PhaseMode,
    pub seed: u64,
    /// Worker threads; 1 generates serially.
    pub workers: usize,
}

/// Shared profile of [`PhaseMode::Fixed`].
pub fn fixed_phase_profile(n: usize, seed: u64) -> Result<PhaseShiftVector> {
    random_phase_shifts(n, derive_seed(seed, stream::FIXED_PHASES))
}

fn to_c32(v: &Complex64) -> Complex32 {
    Complex32::new(v.re as f32, v.im as f32)
}

/// Phase profile applied to sample `index`.
pub fn sample_phase_shifts(
    scenario: &Scenario,
    g_ur: &ndarray::Array1<Complex64>,
    mode: PhaseMode,
    seeds: &SampleSeeds,
    fixed: Option<&PhaseShiftVector>,
) -> Result<PhaseShiftVector> {
    match mode {
        PhaseMode::RandomPerSample => random_phase_shifts(scenario.ris_len(), seeds.phases),
        PhaseMode::OptimizedPerSample => {
            Ok(optimize_phase_shifts(scenario.h_rb(), g_ur, PHASE_OPT_MAX_ITERS, PHASE_OPT_TOL)?.omega)
        }
        PhaseMode::Fixed => fixed
            .cloned()
            .ok_or_else(|| Error::Config("fixed phase mode needs a shared profile".into())),
    }
}

/// Simulates sample `index`: draws the MU position, chooses phases, and
/// computes the noiseless RIS signal and the noisy BS signal.
pub fn simulate_sample(
    scenario: &Scenario,
    region: &Region,
    mode: PhaseMode,
    master_seed: u64,
    index: u64,
    fixed: Option<&PhaseShiftVector>,
) -> Result<SampleRecord> {
    let seeds = SampleSeeds::new(master_seed, index);
    let p_u: Position = region.sample(&mut rng_from_seed(seeds.position));
    let g_ur = mu_ris_channel(scenario, &p_u)?;
    let omega = sample_phase_shifts(scenario, &g_ur, mode, &seeds, fixed)?;
    let y_r = ris_received(&g_ur, scenario.pilot);
    let y = bs_received(scenario.h_rb(), &omega, &g_ur, scenario.pilot, scenario.noise_power_w, seeds.noise)?;
    Ok(SampleRecord {
        y: y.iter().map(to_c32).collect(),
        y_r: y_r.iter().map(to_c32).collect(),
        p_u,
        sample_index: index,
    })
}

const CHUNK: u64 = 2048;

/// Generates a dataset file. Records are computed per index (in parallel when
/// `workers > 1`) and written in index order, so the output is identical for
/// any worker count.
pub fn generate_dataset(scenario: &Scenario, params: &GenerationParams, path: &Path) -> Result<DatasetHeader> {
    if params.count == 0 {
        return Err(Error::Config("dataset count must be >= 1".into()));
    }
    params.region.validate()?;
    let fixed = match params.phase_mode {
        PhaseMode::Fixed => Some(fixed_phase_profile(scenario.ris_len(), params.seed)?),
        _ => None,
    };
    let header = DatasetHeader::new(
        &scenario.config,
        scenario.bs_len(),
        scenario.ris_len(),
        params.count,
        &params.region,
        params.phase_mode,
        params.seed,
    );
    let mut writer = DatasetWriter::create(path, header)?;
    let simulate = |i: u64| simulate_sample(scenario, &params.region, params.phase_mode, params.seed, i, fixed.as_ref());
    let pool = if params.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(params.workers)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", params.workers)))?,
        )
    } else {
        None
    };
    let mut start = 0;
    while start < params.count {
        let end = (start + CHUNK).min(params.count);
        let chunk: Vec<SampleRecord> = match &pool {
            Some(pool) => pool.install(|| (start..end).into_par_iter().map(simulate).collect::<Result<_>>())?,
            None => (start..end).map(simulate).collect::<Result<_>>()?,
        };
        for record in &chunk {
            writer.write(record)?;
        }
        start = end;
    }
    writer.finish()
}
