//! End-to-end acceptance checks. Runs without the libtest harness so each
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any FAIL.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::Rng;
use rislab::backbone::BackboneFamily;
use rislab::channel::*;
use rislab::dataset::*;
use rislab::eval::{nmse_cdf, percentile};
use rislab::localizer::{localization_nmse, InputSource, Localizer, LocalizerBackbone, LocalizerConfig};
use rislab::model::{PositionHead, ReconstructionHead};
use rislab::nn::{Graph, Linear, ParamId, ParamStore, Tensor};
use rislab::preprocess::{upsample, ChannelExpansion, TensorImage};
use rislab::reconstructor::{Reconstructor, ReconstructorConfig, SignalShape};
use rislab::seed::rng_from_seed;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    let geometries = [
        ArrayGeometry::half_wavelength(10, 10, 0.01).unwrap(),
        ArrayGeometry::half_wavelength(3, 3, 0.01).unwrap(),
        ArrayGeometry::new(4, 7, 0.013, 0.02).unwrap(),
    ];
    for g in &geometries {
        let a = steering_vector(g, FRAC_PI_2, FRAC_PI_2).unwrap();
        ensure(a.iter().all(|v| *v == Complex64::new(1.0, 0.0)), || "broadside vector is not all-ones".into())?;
    }
    let mut rng = rng_from_seed(1);
    let mut worst = 0.0f64;
    let draws = 1000;
    for _ in 0..draws {
        let g = ArrayGeometry::new(
            rng.random_range(1..9),
            rng.random_range(1..9),
            rng.random_range(0.001..0.05),
            rng.random_range(0.001..0.05),
        )
        .unwrap();
        let theta = rng.random_range(1e-6..std::f64::consts::PI);
        let phi = rng.random_range(1e-6..std::f64::consts::PI);
        let a = steering_vector(&g, theta, phi).unwrap();
        // Kronecker product of the per-axis factors, elevation index slowest.
        let k = 2.0 * std::f64::consts::PI * g.spacing_m / g.wavelength_m;
        let elev: Vec<Complex64> = (0..g.n_elev).map(|i| Complex64::from_polar(1.0, -k * i as f64 * theta.cos())).collect();
        let azim: Vec<Complex64> =
            (0..g.n_azim).map(|l| Complex64::from_polar(1.0, -k * l as f64 * theta.sin() * phi.cos())).collect();
        for (i, e) in elev.iter().enumerate() {
            for (l, z) in azim.iter().enumerate() {
                worst = worst.max((a[i * g.n_azim + l] - e * z).norm());
            }
        }
    }
    ensure(worst <= 1e-12, || format!("Kronecker mismatch {worst:.3e} > 1e-12"))?;
    Ok(format!("broadside all-ones; {draws} Kronecker draws, max deviation {worst:.2e}"))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let sc = Scenario::with_scatterers(ScenarioConfig::reference(), vec![], vec![]).unwrap();
    let h = sc.h_rb();
    let p_u = Position::new(10.0, 5.0, 1.5);
    let paths = mu_ris_paths(&sc, &p_u).unwrap();
    let bs_paths = ris_bs_paths(&sc).unwrap();
    ensure(paths.count() == 1 && bs_paths.count() == 1, || "expected single-path links".into())?;
    let g = mu_ris_channel(&sc, &p_u).unwrap();
    let opt = optimize_phase_shifts(h, &g, 100, 1e-14).unwrap();
    let sigma2 = sc.noise_power_w;
    let snr = received_snr(h, &opt.omega, &g, sc.pilot, sigma2).unwrap();
    let (n, m) = (sc.ris_len() as f64, sc.bs_len() as f64);
    let alpha = paths.gains[0].norm_sqr();
    let beta = bs_paths.gains[0].norm_sqr();
    let closed = alpha * beta * n * n * m * sc.pilot.norm_sqr() / sigma2;
    let rel = (snr - closed).abs() / closed;
    ensure(rel <= 1e-9, || format!("optimized SNR {snr:.6e} vs closed form {closed:.6e} (rel {rel:.2e})"))?;
    let mut best_random = 0.0f64;
    for seed in 0..100 {
        let w = random_phase_shifts(sc.ris_len(), 1000 + seed).unwrap();
        let r = received_snr(h, &w, &g, sc.pilot, sigma2).unwrap();
        ensure(r < snr, || format!("random draw {seed} reached SNR {r:.4e} >= {snr:.4e}"))?;
        best_random = best_random.max(r);
    }
    Ok(format!(
        "SNR rel. error {rel:.2e}; optimized {:.1} dB beats best of 100 random draws {:.1} dB",
        10.0 * snr.log10(),
        10.0 * best_random.log10()
    ))
}

// ---------------------------------------------------------------- 3

fn file_sha(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sc = Scenario::from_config(ScenarioConfig::reference()).unwrap();
    let mut params = GenerationParams {
        region: Region::default_sampling(),
        count: 1000,
        phase_mode: PhaseMode::OptimizedPerSample,
        seed: 31,
        workers: 1,
    };
    let a = dir.path().join("a.risd");
    let b = dir.path().join("b.risd");
    let c = dir.path().join("c.risd");
    generate_dataset(&sc, &params, &a).map_err(|e| e.to_string())?;
    generate_dataset(&sc, &params, &b).map_err(|e| e.to_string())?;
    params.workers = 4;
    generate_dataset(&sc, &params, &c).map_err(|e| e.to_string())?;
    let (ha, hb, hc) = (file_sha(&a), file_sha(&b), file_sha(&c));
    ensure(ha == hb, || "repeated serial generation differs".into())?;
    ensure(ha == hc, || "4-worker generation differs from serial".into())?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(180), || format!("took {elapsed:?}"))?;
    Ok(format!("1000 samples x3 (serial, serial, 4 workers) identical; {:.1} s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut rng = rng_from_seed(4);
    for trial in 0..200 {
        let (h, w) = (rng.random_range(1..8), rng.random_range(1..8));
        let (oh, ow) = (h + rng.random_range(0..40), w + rng.random_range(0..40));
        let data: Vec<f32> = (0..2 * h * w).map(|_| rng.random_range(-1e4f32..1e4)).collect();
        let t = TensorImage::new(2, h, w, data).unwrap();
        let u = upsample(&t, oh, ow).unwrap();
        for c in 0..2 {
            for (y, x, iy, ix) in [(0, 0, 0, 0), (0, ow - 1, 0, w - 1), (oh - 1, 0, h - 1, 0), (oh - 1, ow - 1, h - 1, w - 1)] {
                ensure(u.get(c, y, x).to_bits() == t.get(c, iy, ix).to_bits(), || {
                    format!("trial {trial}: corner ({y},{x}) of channel {c} differs")
                })?;
            }
        }
    }
    let vals = [1.0f32, -2.0, 4.0, 0.5, 3.0, 8.0, -1.0, 6.0, 2.0];
    let t = TensorImage::new(1, 3, 3, vals.to_vec()).unwrap();
    let u = upsample(&t, 5, 5).unwrap();
    let center = u.get(0, 2, 2);
    ensure((center - 3.0).abs() <= 1e-6, || format!("center {center} != 3"))?;
    // Output (1, 3) samples input (0.5, 1.5): mean of -2, 4, 3, 8.
    let off = u.get(0, 1, 3);
    ensure((off - 3.25).abs() <= 1e-6, || format!("pixel (1,3) = {off} != 3.25"))?;
    Ok(format!("corners bit-exact over 200 random shapes; 3x3->5x5 center {center}, (1,3) {off}"))
}

// ---------------------------------------------------------------- 5

fn small_records(count: u64, seed: u64) -> (SignalShape, Vec<SampleRecord>) {
    let sc = Scenario::from_config(ScenarioConfig::reference()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.risd");
    let p = GenerationParams {
        region: Region::default_sampling(),
        count,
        phase_mode: PhaseMode::Fixed,
        seed,
        workers: 1,
    };
    generate_dataset(&sc, &p, &path).unwrap();
    (SignalShape::from_scenario(&sc.config), load_dataset(&path).unwrap().1)
}

fn criterion_5() -> Outcome {
    let (shape, recs) = small_records(32, 55);
    let mut rc = ReconstructorConfig::new(BackboneFamily::Tiny);
    rc.width = Some(16);
    rc.upsample_hw = [16, 16];
    rc.epochs = 500;
    rc.batch_size = 8;
    let start = Instant::now();
    let (rec, _) = Reconstructor::train(&recs, &recs, rc, shape).map_err(|e| e.to_string())?;
    let recon_time = start.elapsed();
    let nmse = rec.evaluate(&recs).map_err(|e| e.to_string())?;
    let mean_nmse = nmse.iter().sum::<f64>() / nmse.len() as f64;

    let mut lc = LocalizerConfig::new(LocalizerBackbone::Tiny, InputSource::GroundTruthRis);
    lc.width = Some(16);
    lc.upsample_hw = [16, 16];
    lc.epochs = 500;
    lc.batch_size = 8;
    let start = Instant::now();
    let (loc, _) = Localizer::train(&recs, &recs, None, lc, shape).map_err(|e| e.to_string())?;
    let loc_time = start.elapsed();
    let est = loc.locate(&recs, None).map_err(|e| e.to_string())?;
    let err = est.iter().zip(&recs).map(|(p, r)| p.distance(&r.p_u)).sum::<f64>() / recs.len() as f64;

    let limit = Duration::from_secs(600);
    ensure(mean_nmse <= 1e-2, || format!("reconstructor train NMSE {mean_nmse:.3e} > 1e-2"))?;
    ensure(err <= 0.1, || format!("localizer train error {err:.3} m > 0.1 m"))?;
    ensure(recon_time < limit && loc_time < limit, || "overfit run exceeded 10 minutes".into())?;
    Ok(format!(
        "reconstructor NMSE {mean_nmse:.2e} ({:.0} s); localizer error {err:.3} m ({:.0} s)",
        recon_time.as_secs_f64(),
        loc_time.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 6, 7

const DESK_TRAIN: usize = 20_000;
const DESK_VAL: usize = 1_000;
const DESK_TEST: usize = 2_000;
const DESK_NOISE_DBM: f64 = -160.0;
const DESK_EPOCHS: usize = 30;

/// 90th-percentile localization NMSE of both pipelines for one phase mode.
#[derive(Debug, Clone, Copy)]
struct DeskResult {
    ris_p90: f64,
    bs_p90: f64,
}

fn desk_run(mode: PhaseMode) -> Result<DeskResult, String> {
    let err = |e: rislab::Error| e.to_string();
    let mut cfg = ScenarioConfig::reference();
    cfg.noise_power_dbm = DESK_NOISE_DBM;
    let sc = Scenario::from_config(cfg).map_err(err)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("desk.risd");
    let params = GenerationParams {
        region: Region::default_sampling(),
        count: (DESK_TRAIN + DESK_VAL + DESK_TEST) as u64,
        phase_mode: mode,
        seed: 11,
        workers: 1,
    };
    generate_dataset(&sc, &params, &path).map_err(err)?;
    let (_, recs) = load_dataset(&path).map_err(err)?;
    let (train, rest) = recs.split_at(DESK_TRAIN);
    let (val, test) = rest.split_at(DESK_VAL);
    let shape = SignalShape::from_scenario(&sc.config);

    let mut rc = ReconstructorConfig::new(BackboneFamily::Tiny);
    rc.width = Some(8);
    rc.upsample_hw = [16, 16];
    rc.epochs = DESK_EPOCHS;
    let (rec, _) = Reconstructor::train(train, val, rc, shape).map_err(err)?;

    let p90 = |source: InputSource| -> Result<f64, String> {
        let mut lc = LocalizerConfig::new(LocalizerBackbone::Tiny, source);
        lc.width = Some(8);
        lc.upsample_hw = [16, 16];
        lc.epochs = DESK_EPOCHS;
        // No pretrained weights for the tiny backbone, so nothing to protect by freezing.
        lc.unfreeze_schedule = vec![];
        let (loc, _) = Localizer::train(train, val, Some(&rec), lc, shape).map_err(err)?;
        let est = loc.locate(test, Some(&rec)).map_err(err)?;
        let nmse = est
            .iter()
            .zip(test)
            .map(|(p, r)| localization_nmse(p, &r.p_u))
            .collect::<rislab::Result<Vec<_>>>()
            .map_err(err)?;
        percentile(&nmse_cdf(&nmse).map_err(err)?, 0.9).map_err(err)
    };
    Ok(DeskResult {
        ris_p90: p90(InputSource::Reconstructed)?,
        bs_p90: p90(InputSource::BsBaseline)?,
    })
}

fn desk_result(mode: PhaseMode) -> Result<DeskResult, String> {
    static FIXED: OnceLock<Result<DeskResult, String>> = OnceLock::new();
    static OPTIMIZED: OnceLock<Result<DeskResult, String>> = OnceLock::new();
    let cell = match mode {
        PhaseMode::Fixed => &FIXED,
        PhaseMode::OptimizedPerSample => &OPTIMIZED,
        other => return Err(format!("no desk run for {other}")),
    };
    cell.get_or_init(|| desk_run(mode)).clone()
}

fn criterion_6() -> Outcome {
    let r = desk_result(PhaseMode::Fixed)?;
    let ratio = r.ris_p90 / r.bs_p90;
    let detail = format!("NMSE90 reconstructed-RIS {:.4e} vs BS {:.4e}, ratio {ratio:.3} (need <= 0.7)", r.ris_p90, r.bs_p90);
    ensure(r.ris_p90 < r.bs_p90 && ratio <= 0.7, || detail.clone())?;
    Ok(detail)
}

fn criterion_7() -> Outcome {
    let random = desk_result(PhaseMode::Fixed)?;
    let optimized = desk_result(PhaseMode::OptimizedPerSample)?;
    let ris_gap = (optimized.ris_p90 - random.ris_p90).abs();
    let bs_gap = (optimized.bs_p90 - random.bs_p90).abs();
    let ratio = ris_gap / bs_gap;
    let detail = format!(
        "NMSE90 gap optimized vs random: RIS {ris_gap:.4e} ({:.4e}/{:.4e}), BS {bs_gap:.4e} ({:.4e}/{:.4e}), ratio {ratio:.3} (need < 0.5)",
        optimized.ris_p90, random.ris_p90, optimized.bs_p90, random.bs_p90
    );
    ensure(ris_gap < 0.5 * bs_gap, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn brute_percentile(list: &[f64], q: f64) -> f64 {
    let n = list.len() as f64;
    let mut best = f64::INFINITY;
    for &v in list {
        let count = list.iter().filter(|&&x| x <= v).count() as f64;
        if count / n >= q && v < best {
            best = v;
        }
    }
    best
}

fn criterion_8() -> Outcome {
    let mut rng = rng_from_seed(8);
    let mut checks = 0usize;
    for trial in 0..1000 {
        let n = rng.random_range(1..60);
        let ties = rng.random_bool(0.3);
        let list: Vec<f64> = (0..n)
            .map(|_| if ties { rng.random_range(0..6) as f64 } else { rng.random_range(0.0..1.0) })
            .collect();
        let curve = nmse_cdf(&list).map_err(|e| e.to_string())?;
        for (i, (&v, &p)) in curve.values.iter().zip(&curve.probs).enumerate() {
            let below = list.iter().filter(|&&x| x < v).count();
            let at_or_below = list.iter().filter(|&&x| x <= v).count();
            ensure(p == (i + 1) as f64 / n as f64 && below <= i && i < at_or_below, || {
                format!("trial {trial}: CDF step {i} inconsistent with counting")
            })?;
        }
        let mut qs: Vec<f64> = (1..=n).map(|k| k as f64 / n as f64).collect();
        qs.extend((0..5).map(|_| rng.random_range(1e-9..1.0)));
        qs.push(1.0);
        for q in qs {
            let got = percentile(&curve, q).map_err(|e| e.to_string())?;
            let want = brute_percentile(&list, q);
            ensure(got == want, || format!("trial {trial}: percentile({q}) = {got}, brute force {want}"))?;
            checks += 1;
        }
    }
    Ok(format!("1000 random lists, {checks} percentile queries, all exact"))
}

// ---------------------------------------------------------------- 9

/// Central-difference check of d(Σ c·out)/d(param) for every tensor in `ids`
/// (and the input when `check_input` is set), as norm-wise relative error.
fn finite_difference_check(
    store: &mut ParamStore,
    ids: &[ParamId],
    input: &Tensor,
    check_input: bool,
    forward: &dyn Fn(&mut Graph, rislab::nn::NodeId) -> rislab::nn::NodeId,
) -> Result<f64, String> {
    let coeffs: Vec<f32> = {
        let g = &mut Graph::inference(store);
        let x = g.input(input.clone());
        let y = forward(g, x);
        let mut rng = rng_from_seed(99);
        (0..g.value(y).len()).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    };
    let objective = |store: &ParamStore, x: &Tensor| -> f64 {
        let mut g = Graph::inference(store);
        let xi = g.input(x.clone());
        let y = forward(&mut g, xi);
        g.value(y).data().iter().zip(&coeffs).map(|(&o, &c)| o as f64 * c as f64).sum()
    };
    store.zero_grad();
    let analytic_input = {
        let mut g = Graph::new(store, true);
        let x = g.leaf(input.clone());
        let y = forward(&mut g, x);
        let seed = Tensor::from_vec(g.value(y).shape(), coeffs.clone()).unwrap();
        let leaves = g.backward(y, seed);
        leaves.get(x).cloned().ok_or("no gradient reached the input")?
    };
    // Every checked dependency is affine, so a wide step adds no truncation
    // error while keeping f32 rounding small relative to the difference.
    let eps = 5e-2f32;
    let mut worst = 0.0f64;
    let mut compare = |num: &[f64], ana: &[f64], what: &str| -> Result<(), String> {
        let diff: f64 = num.iter().zip(ana).map(|(n, a)| (n - a).powi(2)).sum::<f64>().sqrt();
        let scale = num.iter().map(|v| v * v).sum::<f64>().sqrt().max(ana.iter().map(|v| v * v).sum::<f64>().sqrt());
        let rel = if scale > 0.0 { diff / scale } else { diff };
        worst = worst.max(rel);
        ensure(rel <= 1e-4, || format!("{what}: relative error {rel:.3e} > 1e-4"))
    };
    for &id in ids {
        let len = store.param(id).value.len();
        let ana: Vec<f64> = store.param(id).grad.data().iter().map(|&v| v as f64).collect();
        let mut num = Vec::with_capacity(len);
        for k in 0..len {
            let orig = store.param(id).value.data()[k];
            store.param_mut(id).value.data_mut()[k] = orig + eps;
            let plus = objective(store, input);
            store.param_mut(id).value.data_mut()[k] = orig - eps;
            let minus = objective(store, input);
            store.param_mut(id).value.data_mut()[k] = orig;
            num.push((plus - minus) / (2.0 * eps as f64));
        }
        let name = store.param(id).name.clone();
        compare(&num, &ana, &name)?;
    }
    if check_input {
        let mut num = Vec::with_capacity(input.len());
        for k in 0..input.len() {
            let mut xp = input.clone();
            xp.data_mut()[k] += eps;
            let mut xm = input.clone();
            xm.data_mut()[k] -= eps;
            num.push((objective(store, &xp) - objective(store, &xm)) / (2.0 * eps as f64));
        }
        let ana: Vec<f64> = analytic_input.data().iter().map(|&v| v as f64).collect();
        compare(&num, &ana, "input")?;
    }
    Ok(worst)
}

fn criterion_9() -> Outcome {
    let mut rng = rng_from_seed(9);
    let mut report = Vec::new();

    let mut store = ParamStore::new();
    let expand = ChannelExpansion::new(&mut store, "expand", &mut rng);
    let x = Tensor::from_vec(&[1, 2, 4, 4], (0..32).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
    let ids = [expand.conv.weight, expand.conv.bias.unwrap()];
    let worst = finite_difference_check(&mut store, &ids, &x, true, &|g, x| expand.forward(g, x).unwrap())?;
    report.push(format!("expansion {worst:.1e}"));

    let mut store = ParamStore::new();
    let head = ReconstructionHead {
        linear: Linear::new(&mut store, "head", 12, 20, &mut rng),
    };
    // Features kept away from the ReLU kink so central differences stay on one side.
    let feats: Vec<f32> = (0..2 * 12)
        .map(|_| {
            let v = rng.random_range(0.1f32..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let x = Tensor::from_vec(&[2, 12], feats).unwrap();
    let ids = [head.linear.weight, head.linear.bias];
    let worst = finite_difference_check(&mut store, &ids, &x, true, &|g, x| head.forward(g, x))?;
    report.push(format!("reconstruction head {worst:.1e}"));

    let mut store = ParamStore::new();
    let head = PositionHead {
        linear: Linear::new(&mut store, "head", 5, 3, &mut rng),
    };
    let x = Tensor::from_vec(&[2, 5, 3, 3], (0..90).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
    let ids = [head.linear.weight, head.linear.bias];
    let worst = finite_difference_check(&mut store, &ids, &x, true, &|g, x| head.forward(g, x))?;
    report.push(format!("position head {worst:.1e}"));

    Ok(format!("max relative error: {}", report.join(", ")))
}

fn main() {
    let criteria: Vec<(u32, &str, fn() -> Outcome)> = vec![
        (1, "steering-vector analytics", criterion_1),
        (2, "rank-one phase optimization", criterion_2),
        (3, "dataset determinism", criterion_3),
        (4, "upsample anchors", criterion_4),
        (5, "overfit sanity", criterion_5),
        (6, "ordering at desk scale", criterion_6),
        (7, "robustness to phase optimization", criterion_7),
        (8, "CDF/percentile oracle", criterion_8),
        (9, "gradient checks", criterion_9),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{secs:.1} s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL [{secs:.1} s] {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
