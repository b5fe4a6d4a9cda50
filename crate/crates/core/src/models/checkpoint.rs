//! Model checkpoints: a JSON manifest (`model.json`) plus a binary blob
//! (`model.bin`) of concatenated tensor dumps in manifest order.
//!
//! The blob stores every tensor as f64 (see the dump format), so a
//! checkpoint written from an f32 model and one written from an f64 model
//! with identical parameters are byte-identical, and either loads into
//! either precision.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{read_dump, write_dump, DumpError, Precision, Scalar, Tensor};

use super::{build_model, Model, ModelError, ModelSpec};

pub const MANIFEST_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "model.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("manifest parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    /// Precision the model ran in when saved; informative only, the blob is
    /// always f64.
    precision: Precision,
    total_params: usize,
    spec: ModelSpec,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

/// Write `model.json` and `model.bin` under `dir`, creating it if needed.
/// Entry order: trainable parameters in canonical order, then the batch-norm
/// running statistics.
pub fn save_model<T: Scalar>(model: &Model<T>, dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let mut entries = Vec::new();
    let bin_path = dir.join(WEIGHTS_FILE);
    let file = fs::File::create(&bin_path).map_err(|e| io_err(&bin_path, e))?;
    let mut w = BufWriter::new(file);
    for (name, t) in model.named_params() {
        entries.push(ManifestEntry {
            name,
            shape: t.shape().dims().to_vec(),
            trainable: true,
        });
        write_dump(&mut w, t)?;
    }
    for (name, t) in model.named_state() {
        entries.push(ManifestEntry {
            name,
            shape: t.shape().dims().to_vec(),
            trainable: false,
        });
        write_dump(&mut w, t)?;
    }
    w.flush().map_err(|e| io_err(&bin_path, e))?;

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        precision: T::DTYPE,
        total_params: model.total_params,
        spec: model.spec.clone(),
        entries,
    };
    let json_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&json_path, json + "\n").map_err(|e| io_err(&json_path, e))?;
    Ok(())
}

/// Load a checkpoint directory into a model of precision `T`. The model is
/// rebuilt from the manifest spec, then every tensor is overwritten from the
/// blob; names and shapes must line up exactly.
pub fn load_model<T: Scalar>(dir: &Path) -> Result<Model<T>, CheckpointError> {
    let json_path = dir.join(MANIFEST_FILE);
    let json = fs::read_to_string(&json_path).map_err(|e| io_err(&json_path, e))?;
    let manifest: Manifest = serde_json::from_str(&json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Manifest(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }

    let mut model = build_model::<T>(&manifest.spec)?;
    if manifest.total_params != model.total_params {
        return Err(CheckpointError::Manifest(format!(
            "manifest claims {} trainable parameters, spec yields {}",
            manifest.total_params, model.total_params
        )));
    }

    let bin_path = dir.join(WEIGHTS_FILE);
    let file = fs::File::open(&bin_path).map_err(|e| io_err(&bin_path, e))?;
    let mut r = BufReader::new(file);

    let mut cursor = 0usize;
    {
        let mut check_and_read = |name: &str,
                                  shape: &[usize],
                                  trainable: bool|
         -> Result<Tensor<f64>, CheckpointError> {
            let entry = manifest.entries.get(cursor).ok_or_else(|| {
                CheckpointError::Manifest(format!("manifest is missing an entry for {name}"))
            })?;
            if entry.name != name || entry.trainable != trainable {
                return Err(CheckpointError::Manifest(format!(
                    "manifest entry {} is {}, expected {}",
                    cursor, entry.name, name
                )));
            }
            if entry.shape != shape {
                return Err(CheckpointError::Manifest(format!(
                    "{name}: manifest shape {:?} does not match spec shape {:?}",
                    entry.shape, shape
                )));
            }
            cursor += 1;
            let t = read_dump(&mut r)?;
            if t.shape().dims() != shape {
                return Err(CheckpointError::Manifest(format!(
                    "{name}: blob shape {:?} does not match manifest shape {:?}",
                    t.shape().dims(),
                    shape
                )));
            }
            Ok(t)
        };

        for (name, t) in model.named_params_mut() {
            let loaded = check_and_read(&name, t.shape().dims(), true)?;
            *t = loaded.cast::<T>();
        }
        for (name, t) in model.named_state_mut() {
            *t = check_and_read(&name, t.shape().dims(), false)?;
        }
    }
    if cursor != manifest.entries.len() {
        return Err(CheckpointError::Manifest(format!(
            "manifest lists {} entries but the model uses {}",
            manifest.entries.len(),
            cursor
        )));
    }
    Ok(model)
}
