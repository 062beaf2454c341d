//! Checkpoint directories: `model.json` (configuration and statistics),
//! `weights.bin` (flat weight file), and `history.csv` (per-epoch metrics).

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{load_weights, save_weights, ParamStore};

pub const MODEL_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const HISTORY_FILE: &str = "history.csv";

/// Creates `dir`, refusing to replace an existing checkpoint unless `force`.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.join(MODEL_FILE).exists() && !force {
        return Err(Error::AlreadyExists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| missing_or_io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Writes the three checkpoint files into `dir`.
pub fn save<M: Serialize, H: Serialize>(dir: &Path, force: bool, model: &M, store: &ParamStore, history: &[H]) -> Result<()> {
    prepare_dir(dir, force)?;
    save_weights(store, &dir.join(WEIGHTS_FILE))?;
    write_csv(&dir.join(HISTORY_FILE), history)?;
    write_json(&dir.join(MODEL_FILE), model)
}

/// Reads `model.json` and loads every stored weight into `store`.
pub fn load_weights_into(dir: &Path, store: &mut ParamStore) -> Result<()> {
    let path = dir.join(WEIGHTS_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    load_weights(store, &path, true)?;
    Ok(())
}

fn missing_or_io(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingArtifact(path.display().to_string())
    } else {
        Error::io(path, e)
    }
}

pub fn model_path(dir: &Path) -> PathBuf {
    dir.join(MODEL_FILE)
}
