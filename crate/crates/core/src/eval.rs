//! Test-set evaluation of trained pipelines: localization NMSE CDFs,
//! percentile tables, provenance summaries, and CDF overlay figures.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, write_csv, write_json};
use crate::dataset::{load_dataset, split_indices, DatasetHeader, PhaseMode};
use crate::error::{Error, Result};
use crate::localizer::{localization_nmse, InputSource, Localizer};
use crate::reconstructor::Reconstructor;

/// Empirical CDF with `P(X ≤ values[i]) = (i + 1) / n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfCurve {
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn nmse_cdf(errors: &[f64]) -> Result<CdfCurve> {
    if errors.is_empty() {
        return Err(Error::Domain("CDF of an empty list".into()));
    }
    if errors.iter().any(|e| e.is_nan()) {
        return Err(Error::Domain("CDF input contains NaN".into()));
    }
    let mut values = errors.to_vec();
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let probs = (1..=values.len()).map(|i| i as f64 / n).collect();
    Ok(CdfCurve { values, probs })
}

/// Smallest value whose empirical CDF reaches `q`.
pub fn percentile(curve: &CdfCurve, q: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("percentile level {q} outside (0, 1]")));
    }
    let n = curve.values.len();
    if n == 0 {
        return Err(Error::Domain("percentile of an empty curve".into()));
    }
    // (i + 1) / n ≥ q  ⇔  i ≥ ⌈q·n⌉ − 1, guarded against rounding in q·n.
    let mut i = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
    while i > 0 && curve.probs[i - 1] >= q {
        i -= 1;
    }
    while curve.probs[i] < q && i + 1 < n {
        i += 1;
    }
    Ok(curve.values[i])
}

fn default_fractions() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}
fn default_max_test() -> usize {
    2000
}

/// One curve of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub label: String,
    pub dataset: PathBuf,
    /// Reconstructor checkpoint; required by localizers fed reconstructed signals.
    #[serde(default)]
    pub reconstructor: Option<PathBuf>,
    pub localizer: PathBuf,
    pub phase_mode: PhaseMode,
    #[serde(default = "default_fractions")]
    pub split_fractions: [f64; 3],
    #[serde(default)]
    pub split_seed: u64,
    /// Cap on evaluated test samples.
    #[serde(default = "default_max_test")]
    pub max_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub label: String,
    pub n: usize,
    pub nmse_p50: f64,
    pub nmse_p90: f64,
    pub mean_pos_err_m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecResult {
    pub label: String,
    pub metrics: MetricsRow,
    pub nmse: Vec<f64>,
    pub test_indices: Vec<usize>,
    pub input_source: InputSource,
    pub dataset_master_seed: u64,
    pub dataset_digest: String,
    pub localizer_model: serde_json::Value,
    pub reconstructor_model: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecFailure {
    pub label: String,
    pub error: String,
}

/// Everything `run_experiment` learned, as written to `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub specs: Vec<ExperimentSpec>,
    pub results: Vec<SpecResult>,
    pub failures: Vec<SpecFailure>,
}

impl ExperimentSummary {
    pub fn result(&self, label: &str) -> Option<&SpecResult> {
        self.results.iter().find(|r| r.label == label)
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CDF_PNG: &str = "cdf.png";
pub const CDF_SVG: &str = "cdf.svg";

/// Evaluates every spec on its test split and writes `metrics.csv`,
/// `summary.json`, `cdf.png`, and `cdf.svg` to `out_dir`. A spec that cannot
/// be evaluated is recorded as a failure; the rest still run.
pub fn run_experiment(specs: &[ExperimentSpec], out_dir: &Path, workers: usize) -> Result<ExperimentSummary> {
    let mut seen = HashSet::new();
    for s in specs {
        if !seen.insert(s.label.as_str()) {
            return Err(Error::Config(format!("duplicate experiment label '{}'", s.label)));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let outcomes: Vec<Result<SpecResult>> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
        pool.install(|| specs.par_iter().map(evaluate_spec).collect())
    } else {
        specs.iter().map(evaluate_spec).collect()
    };
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (spec, outcome) in specs.iter().zip(outcomes) {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => {
                log::error!("spec '{}' failed: {e}", spec.label);
                failures.push(SpecFailure {
                    label: spec.label.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    let summary = ExperimentSummary {
        specs: specs.to_vec(),
        results,
        failures,
    };
    let rows: Vec<MetricsRow> = summary.results.iter().map(|r| r.metrics.clone()).collect();
    write_csv(&out_dir.join(METRICS_FILE), &rows)?;
    write_json(&out_dir.join(SUMMARY_FILE), &summary)?;
    render_figures(&summary, out_dir)?;
    Ok(summary)
}

/// Rewrites the figures of a stored summary.
pub fn render_figures(summary: &ExperimentSummary, out_dir: &Path) -> Result<()> {
    let curves = summary
        .results
        .iter()
        .map(|r| Ok((r.label.clone(), nmse_cdf(&r.nmse)?)))
        .collect::<Result<Vec<_>>>()?;
    plot_cdfs(&curves, &out_dir.join(CDF_PNG), &out_dir.join(CDF_SVG))
}

fn read_model_json(dir: &Path) -> Result<serde_json::Value> {
    checkpoint::read_json(&checkpoint::model_path(dir))
}

/// Evaluates one spec on its test split.
pub fn evaluate_spec(spec: &ExperimentSpec) -> Result<SpecResult> {
    if !spec.dataset.exists() {
        return Err(Error::MissingArtifact(format!("dataset {}", spec.dataset.display())));
    }
    let (header, records) = load_dataset(&spec.dataset)?;
    check_phase_mode(spec, &header)?;
    let split = split_indices(records.len(), spec.split_fractions, spec.split_seed)?;
    let test_indices: Vec<usize> = split.test.iter().copied().take(spec.max_test).collect();
    let test: Vec<_> = test_indices.iter().map(|&i| records[i].clone()).collect();
    let localizer = Localizer::load(&spec.localizer)?;
    let reconstructor = match (&spec.reconstructor, localizer.config.input_source) {
        (Some(dir), InputSource::Reconstructed) => Some(Reconstructor::load(dir)?),
        (None, InputSource::Reconstructed) => {
            return Err(Error::MissingArtifact(format!(
                "spec '{}' feeds reconstructed signals but names no reconstructor",
                spec.label
            )))
        }
        _ => None,
    };
    let estimates = localizer.locate(&test, reconstructor.as_ref())?;
    let nmse = estimates
        .iter()
        .zip(&test)
        .map(|(p, r)| localization_nmse(p, &r.p_u))
        .collect::<Result<Vec<_>>>()?;
    let mean_err = estimates.iter().zip(&test).map(|(p, r)| p.distance(&r.p_u)).sum::<f64>() / test.len() as f64;
    let curve = nmse_cdf(&nmse)?;
    Ok(SpecResult {
        label: spec.label.clone(),
        metrics: MetricsRow {
            label: spec.label.clone(),
            n: nmse.len(),
            nmse_p50: percentile(&curve, 0.5)?,
            nmse_p90: percentile(&curve, 0.9)?,
            mean_pos_err_m: mean_err,
        },
        nmse,
        test_indices,
        input_source: localizer.config.input_source,
        dataset_master_seed: header.master_seed,
        dataset_digest: header.scenario_digest.clone(),
        localizer_model: read_model_json(&spec.localizer)?,
        reconstructor_model: match (&spec.reconstructor, reconstructor.is_some()) {
            (Some(dir), true) => Some(read_model_json(dir)?),
            _ => None,
        },
    })
}

fn check_phase_mode(spec: &ExperimentSpec, header: &DatasetHeader) -> Result<()> {
    if header.phase_mode != spec.phase_mode {
        return Err(Error::Config(format!(
            "spec '{}' expects phase mode {} but {} was generated with {}",
            spec.label,
            spec.phase_mode,
            spec.dataset.display(),
            header.phase_mode
        )));
    }
    Ok(())
}

/// Font file used for figure text; overridable with `RISLAB_FONT`.
pub const DEFAULT_FONT: &str = "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf";

fn font_loaded() -> bool {
    static LOADED: OnceLock<bool> = OnceLock::new();
    *LOADED.get_or_init(|| {
        let path = std::env::var("RISLAB_FONT").unwrap_or_else(|_| DEFAULT_FONT.to_string());
        match fs::read(&path) {
            Ok(bytes) => {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok()
            }
            Err(_) => {
                log::warn!("font {path} unavailable; figures are drawn without text");
                false
            }
        }
    })
}

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

/// Overlays step CDFs of the labeled curves, as PNG and SVG.
pub fn plot_cdfs(curves: &[(String, CdfCurve)], png: &Path, svg: &Path) -> Result<()> {
    let text = font_loaded();
    draw(BitMapBackend::new(png, (900, 600)).into_drawing_area(), curves, text)?;
    draw(SVGBackend::new(svg, (900, 600)).into_drawing_area(), curves, text)
}

fn plot_err<E: std::error::Error + Send + Sync>(e: DrawingAreaErrorKind<E>) -> Error {
    Error::Plot(e.to_string())
}

fn draw<DB: DrawingBackend>(root: DrawingArea<DB, plotters::coord::Shift>, curves: &[(String, CdfCurve)], text: bool) -> Result<()>
where
    DB::ErrorType: 'static,
{
    root.fill(&WHITE).map_err(plot_err)?;
    let x_max = curves
        .iter()
        .filter_map(|(_, c)| c.values.last().copied())
        .fold(0.0f64, f64::max)
        .max(1e-12)
        * 1.05;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if text {
        builder.caption("CDF of localization NMSE", ("sans-serif", 24)).x_label_area_size(45).y_label_area_size(55);
    }
    let mut chart = builder.build_cartesian_2d(0.0..x_max, 0.0..1.0).map_err(plot_err)?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc("NMSE").y_desc("CDF");
    } else {
        mesh.disable_x_mesh().disable_y_mesh();
    }
    mesh.draw().map_err(plot_err)?;
    for (k, (label, curve)) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut points = Vec::with_capacity(2 * curve.values.len() + 1);
        let mut prev = 0.0;
        points.push((0.0, 0.0));
        for (&v, &p) in curve.values.iter().zip(&curve.probs) {
            points.push((v, prev));
            points.push((v, p));
            prev = p;
        }
        points.push((x_max, prev));
        let series = chart.draw_series(LineSeries::new(points, color.stroke_width(2))).map_err(plot_err)?;
        if text {
            series
                .label(label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
    }
    if text && !curves.is_empty() {
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::LowerRight)
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .label_font(("sans-serif", 16))
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}
