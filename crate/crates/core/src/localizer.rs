//! Position regression from RIS signals (reconstructed or stored) or, as a
//! baseline, from BS signals, with progressive unfreezing of the backbone.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneFamily, NUM_BLOCKS};
use crate::channel::Position;
use crate::checkpoint;
use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::model::{HeadKind, RegressorNet, BACKBONE_PREFIX};
use crate::nn::{load_weights, ParamStore};
use crate::preprocess::{preprocess_bs, preprocess_ris, ChannelStats, TensorImage};
use crate::reconstructor::{Reconstructor, SignalShape};
use crate::seed::rng_from_seed;
use crate::training::{fit, predict, Examples, FitOptions};

pub const CHECKPOINT_KIND: &str = "localizer";

/// Environment variable naming the pretrained-weight cache directory.
pub const CACHE_ENV: &str = "RISLAB_CACHE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizerBackbone {
    Densenet121LikePretrained,
    Densenet121LikeRandom,
    Tiny,
}

impl LocalizerBackbone {
    pub fn family(self) -> BackboneFamily {
        match self {
            LocalizerBackbone::Tiny => BackboneFamily::Tiny,
            _ => BackboneFamily::Densenet121Like,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    /// RIS signal estimated from the BS signal by a reconstructor.
    Reconstructed,
    /// Stored noiseless RIS signal.
    GroundTruthRis,
    /// BS signal fed to the same architecture.
    BsBaseline,
}

impl fmt::Display for InputSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputSource::Reconstructed => "reconstructed",
            InputSource::GroundTruthRis => "ground_truth_ris",
            InputSource::BsBaseline => "bs_baseline",
        })
    }
}

impl FromStr for InputSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstructed" => Ok(InputSource::Reconstructed),
            "ground_truth_ris" => Ok(InputSource::GroundTruthRis),
            "bs_baseline" => Ok(InputSource::BsBaseline),
            other => Err(Error::Config(format!("unknown input source '{other}'"))),
        }
    }
}

/// How the backbone weights were initialized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PretrainedMode {
    Loaded { path: PathBuf },
    /// Pretrained weights were requested but none were found.
    RandomFallback,
    Random,
}

pub fn default_schedule() -> Vec<(usize, usize)> {
    vec![(5, 1), (10, 2), (15, 3), (20, 4)]
}
fn default_upsample() -> [usize; 2] {
    [256, 256]
}
fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizerConfig {
    pub backbone: LocalizerBackbone,
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default = "default_upsample")]
    pub upsample_hw: [usize; 2],
    /// (epoch, number of deepest blocks trainable from that epoch).
    #[serde(default = "default_schedule")]
    pub unfreeze_schedule: Vec<(usize, usize)>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    pub input_source: InputSource,
}

impl LocalizerConfig {
    pub fn new(backbone: LocalizerBackbone, input_source: InputSource) -> Self {
        LocalizerConfig {
            backbone,
            width: None,
            upsample_hw: default_upsample(),
            unfreeze_schedule: default_schedule(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            seed: 0,
            input_source,
        }
    }

    pub fn width(&self) -> usize {
        self.width.unwrap_or_else(|| self.backbone.family().reference_width())
    }

    pub fn input_dims(&self, shape: &SignalShape) -> (usize, usize) {
        match self.input_source {
            InputSource::BsBaseline => (shape.m1, shape.m2),
            _ => (shape.n1, shape.n2),
        }
    }

    pub fn validate(&self, shape: &SignalShape) -> Result<()> {
        if self.unfreeze_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config("unfreeze schedule epochs must be strictly increasing".into()));
        }
        if self.unfreeze_schedule.iter().any(|&(_, k)| k > NUM_BLOCKS) {
            return Err(Error::Config(format!("unfreeze schedule exceeds {NUM_BLOCKS} blocks")));
        }
        let (h, w) = self.input_dims(shape);
        if self.upsample_hw[0] < h || self.upsample_hw[1] < w {
            return Err(Error::Config(format!(
                "upsample size {:?} is smaller than the {h}x{w} input",
                self.upsample_hw
            )));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("learning rate and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-block trainability at `epoch`: the deepest `k` blocks are trainable,
/// where `k` is the largest count among entries reached by `epoch`. Past the
/// last entry (or with an empty schedule) every block is trainable.
pub fn unfreeze_state(epoch: usize, schedule: &[(usize, usize)]) -> [bool; NUM_BLOCKS] {
    let k = match schedule.last() {
        None => NUM_BLOCKS,
        Some(&(last, _)) if epoch > last => NUM_BLOCKS,
        _ => schedule
            .iter()
            .filter(|&&(e, _)| e <= epoch)
            .map(|&(_, k)| k)
            .max()
            .unwrap_or(0)
            .min(NUM_BLOCKS),
    };
    std::array::from_fn(|b| b >= NUM_BLOCKS - k)
}

/// `‖p̂ − p‖² / ‖p‖²`.
pub fn localization_nmse(estimate: &Position, truth: &Position) -> Result<f64> {
    let norm = truth.dot(truth);
    if norm == 0.0 {
        return Err(Error::Domain("NMSE reference position is the origin".into()));
    }
    let d = *estimate - *truth;
    Ok(d.dot(&d) / norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocHistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mean_pos_err_m: f64,
    pub val_nmse: f64,
    pub trainable_blocks: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    kind: String,
    config: LocalizerConfig,
    shape: SignalShape,
    input_stats: ChannelStats,
    label_stats: ChannelStats,
    pretrained: PretrainedMode,
}

/// A trained localizer.
#[derive(Debug, Clone)]
pub struct Localizer {
    pub config: LocalizerConfig,
    pub shape: SignalShape,
    pub input_stats: ChannelStats,
    pub label_stats: ChannelStats,
    pub pretrained: PretrainedMode,
    pub store: ParamStore,
    pub net: RegressorNet,
}

/// Location of cached pretrained backbone weights for `family` at `width`.
pub fn pretrained_path(cache: &Path, family: BackboneFamily, width: usize) -> PathBuf {
    cache.join(format!("{family}_w{width}.bin"))
}

impl Localizer {
    /// Network with freshly initialized (or cached pretrained) weights.
    pub fn build(
        config: LocalizerConfig,
        shape: SignalShape,
        input_stats: ChannelStats,
        label_stats: ChannelStats,
    ) -> Result<Self> {
        Self::build_with(config, shape, input_stats, label_stats, true)
    }

    fn build_with(
        config: LocalizerConfig,
        shape: SignalShape,
        input_stats: ChannelStats,
        label_stats: ChannelStats,
        use_cache: bool,
    ) -> Result<Self> {
        config.validate(&shape)?;
        let mut store = ParamStore::new();
        let net = RegressorNet::build(
            &mut store,
            config.backbone.family(),
            config.width(),
            (config.upsample_hw[0], config.upsample_hw[1]),
            3,
            HeadKind::Position,
            &mut rng_from_seed(config.seed),
        )?;
        let pretrained = match config.backbone {
            LocalizerBackbone::Densenet121LikePretrained if use_cache => load_pretrained(&mut store, &config)?,
            _ => PretrainedMode::Random,
        };
        Ok(Localizer {
            config,
            shape,
            input_stats,
            label_stats,
            pretrained,
            store,
            net,
        })
    }

    /// Trains on `train`, validating on `val`. `reconstructor` is required
    /// when the input source is [`InputSource::Reconstructed`].
    pub fn train(
        train: &[SampleRecord],
        val: &[SampleRecord],
        reconstructor: Option<&Reconstructor>,
        config: LocalizerConfig,
        shape: SignalShape,
    ) -> Result<(Self, Vec<LocHistoryRow>)> {
        if train.is_empty() {
            return Err(Error::EmptySplit("localizer training set is empty".into()));
        }
        config.validate(&shape)?;
        let raw_train = raw_inputs(train, reconstructor, config.input_source, &shape)?;
        let raw_val = raw_inputs(val, reconstructor, config.input_source, &shape)?;
        let labels: Vec<Vec<f64>> = train.iter().map(|r| r.p_u.to_array().to_vec()).collect();
        let input_stats = ChannelStats::fit(&raw_train)?;
        let label_stats = ChannelStats::fit_columns(&labels)?;
        let mut model = Self::build(config, shape, input_stats, label_stats)?;
        let train_ex = model.examples(&raw_train, train)?;
        let val_ex = model.examples(&raw_val, val)?;
        let opts = FitOptions {
            epochs: model.config.epochs,
            batch_size: model.config.batch_size,
            learning_rate: model.config.learning_rate,
            seed: model.config.seed,
        };
        let schedule = model.config.unfreeze_schedule.clone();
        let label_stats = model.label_stats.clone();
        let mut history = Vec::new();
        fit(
            &model.net,
            &mut model.store,
            &train_ex,
            &val_ex,
            opts,
            |epoch, store| {
                store.set_block_trainability(&unfreeze_state(epoch, &schedule));
            },
            |epoch, train_loss, val_loss, pred| {
                let (err, nmse) = position_metrics(&label_stats, pred, val)?;
                let trainable = unfreeze_state(epoch, &schedule).iter().filter(|&&f| f).count();
                log::info!(
                    "localizer epoch {epoch}: train {train_loss:.5e} val {val_loss:.5e} err {err:.4} m ({trainable} blocks)"
                );
                history.push(LocHistoryRow {
                    epoch,
                    train_loss,
                    val_loss,
                    val_mean_pos_err_m: err,
                    val_nmse: nmse,
                    trainable_blocks: trainable,
                });
                Ok(())
            },
        )?;
        Ok((model, history))
    }

    fn examples(&self, raw: &[TensorImage], records: &[SampleRecord]) -> Result<Examples> {
        let mut ex = Examples::default();
        for (im, r) in raw.iter().zip(records) {
            ex.inputs.push(self.input_stats.normalize_image(im)?);
            let t = self.label_stats.normalize(&r.p_u.to_array())?;
            ex.targets.push(t.into_iter().map(|v| v as f32).collect());
        }
        Ok(ex)
    }

    /// Estimated positions for each record.
    pub fn locate(&self, records: &[SampleRecord], reconstructor: Option<&Reconstructor>) -> Result<Vec<Position>> {
        let raw = raw_inputs(records, reconstructor, self.config.input_source, &self.shape)?;
        self.locate_images(&raw)
    }

    /// Estimated positions for un-normalized (2, h, w) input images.
    pub fn locate_images(&self, raw: &[TensorImage]) -> Result<Vec<Position>> {
        let inputs = raw.iter().map(|im| self.input_stats.normalize_image(im)).collect::<Result<Vec<_>>>()?;
        let out = predict(&self.net, &self.store, &inputs, self.config.batch_size)?;
        out.iter().map(|o| denormalize_position(&self.label_stats, o)).collect()
    }

    pub fn save(&self, dir: &Path, force: bool, history: &[LocHistoryRow]) -> Result<()> {
        let file = ModelFile {
            kind: CHECKPOINT_KIND.into(),
            config: self.config.clone(),
            shape: self.shape,
            input_stats: self.input_stats.clone(),
            label_stats: self.label_stats.clone(),
            pretrained: self.pretrained.clone(),
        };
        checkpoint::save(dir, force, &file, &self.store, history)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let file: ModelFile = checkpoint::read_json(&checkpoint::model_path(dir))?;
        if file.kind != CHECKPOINT_KIND {
            return Err(Error::Config(format!("{} holds a {} checkpoint", dir.display(), file.kind)));
        }
        let mut model = Self::build_with(file.config, file.shape, file.input_stats, file.label_stats, false)?;
        model.pretrained = file.pretrained;
        checkpoint::load_weights_into(dir, &mut model.store)?;
        Ok(model)
    }
}

fn load_pretrained(store: &mut ParamStore, config: &LocalizerConfig) -> Result<PretrainedMode> {
    let Some(cache) = std::env::var_os(CACHE_ENV) else {
        log::warn!("{CACHE_ENV} unset; densenet backbone starts from random weights");
        return Ok(PretrainedMode::RandomFallback);
    };
    let path = pretrained_path(Path::new(&cache), config.backbone.family(), config.width());
    if !path.exists() {
        log::warn!("no pretrained weights at {}; using random weights", path.display());
        return Ok(PretrainedMode::RandomFallback);
    }
    let mut backbone_only = ParamStore::new();
    std::mem::swap(&mut backbone_only, store);
    let result = load_backbone(&mut backbone_only, &path);
    std::mem::swap(&mut backbone_only, store);
    let loaded = result?;
    log::info!("loaded {loaded} pretrained tensors from {}", path.display());
    Ok(PretrainedMode::Loaded { path })
}

fn load_backbone(store: &mut ParamStore, path: &Path) -> Result<usize> {
    let before: Vec<(String, Vec<f32>)> = store
        .params()
        .iter()
        .filter(|p| !p.name.starts_with(BACKBONE_PREFIX))
        .map(|p| (p.name.clone(), p.value.data().to_vec()))
        .collect();
    let loaded = load_weights(store, path, false)?;
    for p in store.params_mut() {
        if let Some((_, v)) = before.iter().find(|(n, _)| *n == p.name) {
            p.value.data_mut().copy_from_slice(v);
        }
    }
    Ok(loaded)
}

fn denormalize_position(stats: &ChannelStats, out: &[f32]) -> Result<Position> {
    let v: Vec<f64> = out.iter().map(|&x| x as f64).collect();
    let p = stats.denormalize(&v)?;
    Ok(Position::new(p[0], p[1], p[2]))
}

fn position_metrics(stats: &ChannelStats, pred: &[Vec<f32>], records: &[SampleRecord]) -> Result<(f64, f64)> {
    let mut err = 0.0;
    let mut nmse = 0.0;
    for (o, r) in pred.iter().zip(records) {
        let p = denormalize_position(stats, o)?;
        err += p.distance(&r.p_u);
        nmse += localization_nmse(&p, &r.p_u)?;
    }
    let n = records.len().max(1) as f64;
    Ok((err / n, nmse / n))
}

/// Un-normalized input images of `records` for `source`.
pub fn raw_inputs(
    records: &[SampleRecord],
    reconstructor: Option<&Reconstructor>,
    source: InputSource,
    shape: &SignalShape,
) -> Result<Vec<TensorImage>> {
    match source {
        InputSource::BsBaseline => records.iter().map(|r| preprocess_bs(&r.y, shape.m1, shape.m2)).collect(),
        InputSource::GroundTruthRis => records.iter().map(|r| preprocess_ris(&r.y_r, shape.n1, shape.n2)).collect(),
        InputSource::Reconstructed => {
            let rec = reconstructor.ok_or_else(|| {
                Error::MissingArtifact("reconstructed input source requires a trained reconstructor".into())
            })?;
            if rec.shape != *shape {
                return Err(Error::Shape("reconstructor was trained for a different array geometry".into()));
            }
            let est: Vec<Vec<Complex32>> = rec.reconstruct_records(records)?;
            est.iter().map(|v| preprocess_ris(v, shape.n1, shape.n2)).collect()
        }
    }
}
