//! Command-line driver for the simulation, training, and evaluation pipeline.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rislab::channel::Scenario;
use rislab::dataset::{generate_dataset, load_dataset, split_indices, GenerationParams, PhaseMode, SampleRecord};
use rislab::eval::{run_experiment, ExperimentSpec};
use rislab::localizer::{InputSource, Localizer};
use rislab::reconstructor::{Reconstructor, SignalShape};
use rislab::Error;

use config::Loaded;

#[derive(Parser)]
#[command(name = "rislab", version, about = "RIS-aided localization pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Root that dataset, checkpoint, and evaluation paths are relative to.
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,
    /// Worker threads for dataset generation and evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Single-threaded numerics throughout.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a fingerprint dataset.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        count: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        phase_mode: Option<PhaseMode>,
        #[arg(long)]
        noise_power_dbm: Option<f64>,
        /// Dataset file; overrides `dataset.path`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the RIS signal reconstructor.
    TrainRecon {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the localizer.
    TrainLoc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        input_source: Option<InputSource>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate trained pipelines and plot NMSE CDFs.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of experiment labels.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

const PIPELINE_FILE: &str = "pipeline.json";

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DIVERGED: u8 = 4;
const EXIT_SPEC_FAILED: u8 = 5;

/// Error raised when evaluation finished but some specs failed.
#[derive(Debug)]
struct SpecsFailed(usize);

impl std::fmt::Display for SpecsFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} experiment spec(s) failed", self.0)
    }
}

impl std::error::Error for SpecsFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<SpecsFailed>().is_some() {
            return EXIT_SPEC_FAILED;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Diverged { .. } => EXIT_DIVERGED,
                Error::Domain(_)
                | Error::Shape(_)
                | Error::Config(_)
                | Error::Json(_)
                | Error::EmptySplit(_)
                | Error::Header(_) => EXIT_CONFIG,
                _ => EXIT_IO,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_CONFIG
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common = cli.common;
    if common.deterministic {
        rayon::ThreadPoolBuilder::new().num_threads(1).build_global().ok();
    }
    match cli.command {
        Command::Simulate {
            config,
            count,
            seed,
            phase_mode,
            noise_power_dbm,
            output,
        } => {
            let loaded = config::load(&config)?;
            let root = output_root(&common, &loaded);
            let mut params = loaded.config.dataset.clone();
            params.count = count.unwrap_or(params.count);
            params.seed = seed.unwrap_or(params.seed);
            params.phase_mode = phase_mode.unwrap_or(params.phase_mode);
            let mut scenario_config = loaded.scenario()?;
            if let Some(n) = noise_power_dbm {
                scenario_config.noise_power_dbm = n;
            }
            let path = root.join(output.unwrap_or(params.path.clone()));
            refuse_existing(&path, common.force)?;
            create_parent(&path)?;
            let scenario = Scenario::from_config(scenario_config)?;
            let header = generate_dataset(
                &scenario,
                &GenerationParams {
                    region: params.region,
                    count: params.count,
                    phase_mode: params.phase_mode,
                    seed: params.seed,
                    workers: workers(&common),
                },
                &path,
            )?;
            println!("dataset      {}", path.display());
            println!("samples      {}", header.sample_count);
            println!("M x N        {} x {}", header.m, header.n);
            println!("phase mode   {}", header.phase_mode);
            println!("seed         {}", header.master_seed);
            println!("scenario     sha256:{}", header.scenario_digest);
            Ok(())
        }
        Command::TrainRecon {
            config,
            epochs,
            seed,
            output,
        } => {
            let loaded = config::load(&config)?;
            let root = output_root(&common, &loaded);
            let stage = loaded.reconstructor()?.clone();
            let mut rc = stage.config;
            rc.epochs = epochs.unwrap_or(rc.epochs);
            rc.seed = seed.unwrap_or(rc.seed);
            let dir = root.join(output.unwrap_or(stage.checkpoint));
            refuse_existing_checkpoint(&dir, common.force)?;
            let (shape, train, val) = splits(&loaded, &root)?;
            let (model, history) = Reconstructor::train(&train, &val, rc, shape)?;
            model.save(&dir, common.force, &history)?;
            echo_config(&loaded, &dir)?;
            if let Some(last) = history.last() {
                println!("epochs {}  train loss {:.5e}  val loss {:.5e}", history.len(), last.train_loss, last.val_loss);
            }
            println!("checkpoint {}", dir.display());
            Ok(())
        }
        Command::TrainLoc {
            config,
            epochs,
            seed,
            input_source,
            output,
        } => {
            let loaded = config::load(&config)?;
            let root = output_root(&common, &loaded);
            let stage = loaded.localizer()?.clone();
            let mut lc = stage.config;
            lc.epochs = epochs.unwrap_or(lc.epochs);
            lc.seed = seed.unwrap_or(lc.seed);
            lc.input_source = input_source.unwrap_or(lc.input_source);
            let dir = root.join(output.unwrap_or(stage.checkpoint));
            refuse_existing_checkpoint(&dir, common.force)?;
            let reconstructor = if lc.input_source == InputSource::Reconstructed {
                let rdir = stage
                    .reconstructor
                    .clone()
                    .or_else(|| loaded.config.reconstructor.as_ref().map(|r| r.checkpoint.clone()))
                    .ok_or_else(|| Error::Config("reconstructed input needs a reconstructor checkpoint".into()))?;
                Some(Reconstructor::load(&root.join(rdir))?)
            } else {
                None
            };
            let (shape, train, val) = splits(&loaded, &root)?;
            let (model, history) = Localizer::train(&train, &val, reconstructor.as_ref(), lc, shape)?;
            model.save(&dir, common.force, &history)?;
            echo_config(&loaded, &dir)?;
            if let Some(last) = history.last() {
                println!(
                    "epochs {}  val mean error {:.4} m  val NMSE {:.5e}",
                    history.len(),
                    last.val_mean_pos_err_m,
                    last.val_nmse
                );
            }
            println!("pretrained   {:?}", model.pretrained);
            println!("checkpoint {}", dir.display());
            Ok(())
        }
        Command::Evaluate { config, labels, output } => {
            let loaded = config::load(&config)?;
            let root = output_root(&common, &loaded);
            let mut specs: Vec<ExperimentSpec> = loaded.config.experiments.clone();
            if let Some(labels) = &labels {
                for l in labels {
                    if !specs.iter().any(|s| &s.label == l) {
                        return Err(Error::Config(format!("no experiment labeled '{l}'")).into());
                    }
                }
                specs.retain(|s| labels.contains(&s.label));
            }
            if specs.is_empty() {
                return Err(Error::Config("config lists no experiments".into()).into());
            }
            for s in &mut specs {
                s.dataset = root.join(&s.dataset);
                s.localizer = root.join(&s.localizer);
                s.reconstructor = s.reconstructor.as_ref().map(|r| root.join(r));
            }
            let dir = root.join(output.unwrap_or(loaded.config.evaluation_dir.clone()));
            if dir.join(rislab::eval::SUMMARY_FILE).exists() && !common.force {
                return Err(Error::AlreadyExists(dir).into());
            }
            let summary = run_experiment(&specs, &dir, workers(&common))?;
            println!("{:<24} {:>6} {:>12} {:>12} {:>12}", "label", "n", "nmse_p50", "nmse_p90", "mean_err_m");
            for r in &summary.results {
                let m = &r.metrics;
                println!(
                    "{:<24} {:>6} {:>12.5e} {:>12.5e} {:>12.4}",
                    m.label, m.n, m.nmse_p50, m.nmse_p90, m.mean_pos_err_m
                );
            }
            for f in &summary.failures {
                println!("{:<24} FAILED: {}", f.label, f.error);
            }
            println!("outputs in {}", dir.display());
            if summary.failures.is_empty() {
                Ok(())
            } else {
                Err(SpecsFailed(summary.failures.len()).into())
            }
        }
    }
}

fn output_root(common: &Common, loaded: &Loaded) -> PathBuf {
    common
        .output_root
        .clone()
        .or_else(|| loaded.config.output_root.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

fn workers(common: &Common) -> usize {
    if common.deterministic {
        1
    } else {
        common.workers.unwrap_or(1).max(1)
    }
}

fn refuse_existing(path: &Path, force: bool) -> anyhow::Result<()> {
    if path.exists() && !force {
        return Err(Error::AlreadyExists(path.to_path_buf()).into());
    }
    Ok(())
}

fn refuse_existing_checkpoint(dir: &Path, force: bool) -> anyhow::Result<()> {
    refuse_existing(&rislab::checkpoint::model_path(dir), force)
}

/// Copies the input pipeline config next to the checkpoint.
fn echo_config(loaded: &Loaded, dir: &Path) -> anyhow::Result<()> {
    rislab::checkpoint::write_json(&dir.join(PIPELINE_FILE), &loaded.raw)?;
    Ok(())
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

type Splits = (SignalShape, Vec<SampleRecord>, Vec<SampleRecord>);

fn splits(loaded: &Loaded, root: &Path) -> anyhow::Result<Splits> {
    let params = &loaded.config.dataset;
    let path = root.join(&params.path);
    let (header, records) = load_dataset(&path).with_context(|| format!("loading {}", path.display()))?;
    let shape = SignalShape::from_scenario(&header.scenario_config()?);
    let split = split_indices(records.len(), params.split_fractions, params.split_seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    log::info!(
        "{}: {} train / {} val / {} test samples",
        path.display(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok((shape, pick(&split.train), pick(&split.val)))
}
