//! Reconstruction of the RIS received signal from the BS received signal.
//!
//! The BS signal is reshaped into a (2, M1, M2) re/im image, normalized,
//! upsampled, expanded to three channels, passed through a backbone, and
//! mapped by a ReLU + fully connected head to the 2N interleaved (re, im)
//! components of the RIS signal.

use std::path::Path;

use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneFamily;
use crate::channel::ScenarioConfig;
use crate::checkpoint;
use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::model::{HeadKind, RegressorNet};
use crate::nn::ParamStore;
use crate::preprocess::{deinterleave, interleave, preprocess_bs, ChannelStats, TensorImage};
use crate::seed::rng_from_seed;
use crate::training::{fit, predict, Examples, FitOptions};

pub const CHECKPOINT_KIND: &str = "reconstructor";

/// Array shapes of the BS (M1 × M2) and RIS (N1 × N2) signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalShape {
    pub m1: usize,
    pub m2: usize,
    pub n1: usize,
    pub n2: usize,
}

impl SignalShape {
    pub fn from_scenario(config: &ScenarioConfig) -> Self {
        SignalShape {
            m1: config.bs.n_elev,
            m2: config.bs.n_azim,
            n1: config.ris.n_elev,
            n2: config.ris.n_azim,
        }
    }

    pub fn m(&self) -> usize {
        self.m1 * self.m2
    }

    pub fn n(&self) -> usize {
        self.n1 * self.n2
    }
}

fn default_upsample() -> [usize; 2] {
    [256, 256]
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructorConfig {
    pub backbone_family: BackboneFamily,
    /// Channel width; defaults to the family's reference width.
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default = "default_upsample")]
    pub upsample_hw: [usize; 2],
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ReconstructorConfig {
    pub fn new(backbone_family: BackboneFamily) -> Self {
        ReconstructorConfig {
            backbone_family,
            width: None,
            upsample_hw: default_upsample(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            seed: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.width.unwrap_or_else(|| self.backbone_family.reference_width())
    }

    pub fn validate(&self, shape: &SignalShape) -> Result<()> {
        if self.upsample_hw[0] < shape.m1 || self.upsample_hw[1] < shape.m2 {
            return Err(Error::Config(format!(
                "upsample size {:?} is smaller than the {}x{} BS array",
                self.upsample_hw, shape.m1, shape.m2
            )));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("learning rate and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Training-split statistics: per-channel for the input image, per-component
/// for the interleaved target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructorStats {
    pub input: ChannelStats,
    pub target: ChannelStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconHistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    kind: String,
    config: ReconstructorConfig,
    shape: SignalShape,
    stats: ReconstructorStats,
}

/// `‖y_r − ŷ_r‖² / ‖y_r‖²`.
pub fn reconstruction_nmse(estimate: &[Complex32], reference: &[Complex32]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!("lengths {} and {} differ", estimate.len(), reference.len())));
    }
    let mut err = 0.0f64;
    let mut norm = 0.0f64;
    for (e, r) in estimate.iter().zip(reference) {
        let (dr, di) = (e.re as f64 - r.re as f64, e.im as f64 - r.im as f64);
        err += dr * dr + di * di;
        norm += (r.re as f64).powi(2) + (r.im as f64).powi(2);
    }
    if norm == 0.0 {
        return Err(Error::Domain("NMSE reference vector is zero".into()));
    }
    Ok(err / norm)
}

/// A trained reconstructor.
#[derive(Debug, Clone)]
pub struct Reconstructor {
    pub config: ReconstructorConfig,
    pub shape: SignalShape,
    pub stats: ReconstructorStats,
    pub store: ParamStore,
    pub net: RegressorNet,
}

impl Reconstructor {
    /// Untrained network with the given statistics.
    pub fn build(config: ReconstructorConfig, shape: SignalShape, stats: ReconstructorStats) -> Result<Self> {
        config.validate(&shape)?;
        let mut store = ParamStore::new();
        let net = RegressorNet::build(
            &mut store,
            config.backbone_family,
            config.width(),
            (config.upsample_hw[0], config.upsample_hw[1]),
            2 * shape.n(),
            HeadKind::Reconstruction,
            &mut rng_from_seed(config.seed),
        )?;
        Ok(Reconstructor {
            config,
            shape,
            stats,
            store,
            net,
        })
    }

    /// Fits statistics on `train`, then trains on it, validating on `val`.
    pub fn train(
        train: &[SampleRecord],
        val: &[SampleRecord],
        config: ReconstructorConfig,
        shape: SignalShape,
    ) -> Result<(Self, Vec<ReconHistoryRow>)> {
        if train.is_empty() {
            return Err(Error::EmptySplit("reconstructor training set is empty".into()));
        }
        config.validate(&shape)?;
        let raw_inputs = bs_images(train, &shape)?;
        let targets: Vec<Vec<f64>> = train.iter().map(|r| interleave(&r.y_r)).collect();
        let stats = ReconstructorStats {
            input: ChannelStats::fit(&raw_inputs)?,
            target: ChannelStats::fit_columns(&targets)?,
        };
        let mut model = Self::build(config, shape, stats)?;
        let train_ex = model.examples(train)?;
        let val_ex = model.examples(val)?;
        let opts = FitOptions {
            epochs: model.config.epochs,
            batch_size: model.config.batch_size,
            learning_rate: model.config.learning_rate,
            seed: model.config.seed,
        };
        let mut history = Vec::new();
        fit(&model.net, &mut model.store, &train_ex, &val_ex, opts, |_, _| {}, |epoch, train_loss, val_loss, _| {
            log::info!("reconstructor epoch {epoch}: train {train_loss:.5e} val {val_loss:.5e}");
            history.push(ReconHistoryRow {
                epoch,
                train_loss,
                val_loss,
            });
            Ok(())
        })?;
        Ok((model, history))
    }

    fn input_image(&self, y: &[Complex32]) -> Result<TensorImage> {
        self.stats.input.normalize_image(&preprocess_bs(y, self.shape.m1, self.shape.m2)?)
    }

    fn examples(&self, records: &[SampleRecord]) -> Result<Examples> {
        let mut ex = Examples::default();
        for r in records {
            ex.inputs.push(self.input_image(&r.y)?);
            let t = self.stats.target.normalize(&interleave(&r.y_r))?;
            ex.targets.push(t.into_iter().map(|v| v as f32).collect());
        }
        Ok(ex)
    }

    /// Reconstructed RIS signals for a batch of BS signals.
    pub fn reconstruct(&self, ys: &[&[Complex32]]) -> Result<Vec<Vec<Complex32>>> {
        let inputs = ys.iter().map(|y| self.input_image(y)).collect::<Result<Vec<_>>>()?;
        let out = predict(&self.net, &self.store, &inputs, self.config.batch_size)?;
        out.iter()
            .map(|o| {
                let v: Vec<f64> = o.iter().map(|&x| x as f64).collect();
                Ok(deinterleave(&self.stats.target.denormalize(&v)?))
            })
            .collect()
    }

    /// Reconstructions of every record's RIS signal.
    pub fn reconstruct_records(&self, records: &[SampleRecord]) -> Result<Vec<Vec<Complex32>>> {
        let ys: Vec<&[Complex32]> = records.iter().map(|r| r.y.as_slice()).collect();
        self.reconstruct(&ys)
    }

    /// Per-record reconstruction NMSE.
    pub fn evaluate(&self, records: &[SampleRecord]) -> Result<Vec<f64>> {
        self.reconstruct_records(records)?
            .iter()
            .zip(records)
            .map(|(est, r)| reconstruction_nmse(est, &r.y_r))
            .collect()
    }

    pub fn save(&self, dir: &Path, force: bool, history: &[ReconHistoryRow]) -> Result<()> {
        let file = ModelFile {
            kind: CHECKPOINT_KIND.into(),
            config: self.config.clone(),
            shape: self.shape,
            stats: self.stats.clone(),
        };
        checkpoint::save(dir, force, &file, &self.store, history)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let file: ModelFile = checkpoint::read_json(&checkpoint::model_path(dir))?;
        if file.kind != CHECKPOINT_KIND {
            return Err(Error::Config(format!("{} holds a {} checkpoint", dir.display(), file.kind)));
        }
        let mut model = Self::build(file.config, file.shape, file.stats)?;
        checkpoint::load_weights_into(dir, &mut model.store)?;
        Ok(model)
    }
}

fn bs_images(records: &[SampleRecord], shape: &SignalShape) -> Result<Vec<TensorImage>> {
    records.iter().map(|r| preprocess_bs(&r.y, shape.m1, shape.m2)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nmse_examples() {
        let y: Vec<Complex32> = (0..10).map(|i| Complex32::new(i as f32 + 1.0, -0.5 * i as f32)).collect();
        assert_eq!(reconstruction_nmse(&y, &y).unwrap(), 0.0);
        let zero = vec![Complex32::new(0.0, 0.0); 10];
        assert!((reconstruction_nmse(&zero, &y).unwrap() - 1.0).abs() < 1e-12);
        let twice: Vec<Complex32> = y.iter().map(|v| v * 2.0).collect();
        assert!((reconstruction_nmse(&twice, &y).unwrap() - 1.0).abs() < 1e-12);
        assert!(reconstruction_nmse(&y, &zero).is_err());
        assert!(reconstruction_nmse(&y[..3], &y).is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c: ReconstructorConfig = serde_json::from_str(r#"{"backbone_family":"tiny"}"#).unwrap();
        assert_eq!(c.upsample_hw, [256, 256]);
        assert_eq!((c.epochs, c.batch_size, c.learning_rate), (100, 64, 1e-3));
        let shape = SignalShape { m1: 3, m2: 3, n1: 10, n2: 10 };
        assert!(c.validate(&shape).is_ok());
        let mut bad = c.clone();
        bad.upsample_hw = [2, 8];
        assert!(bad.validate(&shape).is_err());
        bad = c;
        bad.learning_rate = 0.0;
        assert!(bad.validate(&shape).is_err());
    }
}
