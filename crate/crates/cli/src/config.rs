use std::path::{Path, PathBuf};

use anyhow::Context;
use rislab::channel::{Region, ScenarioConfig};
use rislab::dataset::PhaseMode;
use rislab::eval::ExperimentSpec;
use rislab::localizer::LocalizerConfig;
use rislab::reconstructor::ReconstructorConfig;
use serde::{Deserialize, Serialize};

/// Scenario given inline or as a path relative to the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioSource {
    Path(PathBuf),
    Inline(Box<ScenarioConfig>),
}

fn default_dataset_path() -> PathBuf {
    PathBuf::from("dataset.risd")
}
fn default_count() -> u64 {
    1000
}
fn default_fractions() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}
fn default_phase_mode() -> PhaseMode {
    PhaseMode::Fixed
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetParams {
    #[serde(default = "default_dataset_path")]
    pub path: PathBuf,
    #[serde(default = "default_count")]
    pub count: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_phase_mode")]
    pub phase_mode: PhaseMode,
    #[serde(default = "Region::default_sampling")]
    pub region: Region,
    #[serde(default = "default_fractions")]
    pub split_fractions: [f64; 3],
    #[serde(default)]
    pub split_seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            path: default_dataset_path(),
            count: default_count(),
            seed: 0,
            phase_mode: default_phase_mode(),
            region: Region::default_sampling(),
            split_fractions: default_fractions(),
            split_seed: 0,
        }
    }
}

fn default_recon_dir() -> PathBuf {
    PathBuf::from("reconstructor")
}
fn default_loc_dir() -> PathBuf {
    PathBuf::from("localizer")
}
fn default_eval_dir() -> PathBuf {
    PathBuf::from("evaluation")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconStage {
    #[serde(default = "default_recon_dir")]
    pub checkpoint: PathBuf,
    pub config: ReconstructorConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocStage {
    #[serde(default = "default_loc_dir")]
    pub checkpoint: PathBuf,
    /// Reconstructor feeding this localizer; defaults to the reconstructor stage's checkpoint.
    #[serde(default)]
    pub reconstructor: Option<PathBuf>,
    pub config: LocalizerConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub scenario: ScenarioSource,
    #[serde(default)]
    pub dataset: DatasetParams,
    #[serde(default)]
    pub reconstructor: Option<ReconStage>,
    #[serde(default)]
    pub localizer: Option<LocStage>,
    #[serde(default)]
    pub experiments: Vec<ExperimentSpec>,
    #[serde(default = "default_eval_dir")]
    pub evaluation_dir: PathBuf,
    #[serde(default)]
    pub output_root: Option<PathBuf>,
}

/// A loaded config with the directory relative paths resolve against.
pub struct Loaded {
    pub config: PipelineConfig,
    pub config_dir: PathBuf,
    pub raw: serde_json::Value,
}

pub fn load(path: &Path) -> anyhow::Result<Loaded> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| rislab::Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| rislab::Error::Config(format!("{}: {e}", path.display())))?;
    let config: PipelineConfig = serde_json::from_value(raw.clone())
        .map_err(|e| rislab::Error::Config(format!("{}: {e}", path.display())))?;
    Ok(Loaded {
        config,
        config_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        raw,
    })
}

impl Loaded {
    pub fn scenario(&self) -> anyhow::Result<ScenarioConfig> {
        match &self.config.scenario {
            ScenarioSource::Inline(c) => Ok((**c).clone()),
            ScenarioSource::Path(p) => {
                let path = self.config_dir.join(p);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| rislab::Error::Config(format!("cannot read scenario {}: {e}", path.display())))?;
                Ok(ScenarioConfig::from_json(&text).with_context(|| format!("scenario {}", path.display()))?)
            }
        }
    }

    pub fn reconstructor(&self) -> anyhow::Result<&ReconStage> {
        self.config
            .reconstructor
            .as_ref()
            .ok_or_else(|| rislab::Error::Config("config has no `reconstructor` section".into()).into())
    }

    pub fn localizer(&self) -> anyhow::Result<&LocStage> {
        self.config
            .localizer
            .as_ref()
            .ok_or_else(|| rislab::Error::Config("config has no `localizer` section".into()).into())
    }
}
