//! Run configuration files, error-to-exit-code mapping, and dataset
//! assembly shared by the `train` and `evaluate` subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use vox4d_core::data::{
    generate_phantom_dataset, load_labels_csv, load_nifti_dataset, make_splits, DataError,
    Dataset, PhantomSpec, SplitPlan, PHANTOM_MRI_DIMS,
};
use vox4d_core::models::{CheckpointError, Modality, ModelError, ModelSpec};
use vox4d_core::training::{TrainConfig, TrainError};

/// Environment variable that overrides the configured `output_dir`, so CI
/// can redirect artifacts into a temp dir without editing archived configs.
pub const OUTPUT_ENV: &str = "VOX4D_OUTPUT_DIR";

// ───────────────────────────── errors ─────────────────────────────

/// Failure classes with their fixed process exit codes. The mapping is
/// part of the CLI contract so automation can tell a typo in a config
/// (2) apart from a missing dataset (3) or a diverged run (4).
#[derive(Debug)]
pub enum CliError {
    /// Malformed or inconsistent configuration — exit 2.
    Config(String),
    /// Missing or unreadable input data, unwritable output — exit 3.
    Data(String),
    /// Every training repeat aborted on a non-finite loss — exit 4.
    AllRepeatsAborted(String),
    /// Gradient check exceeded tolerance — exit 5.
    Gradcheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::AllRepeatsAborted(_) => 4,
            CliError::Gradcheck(_) => 5,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Data(m)
            | CliError::AllRepeatsAborted(m)
            | CliError::Gradcheck(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            // Bad knob values and splits that leave a side empty are
            // problems with the request, not with the data on disk.
            TrainError::InvalidConfig(_) | TrainError::EmptyInput(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

// ───────────────────────────── config file ─────────────────────────────

/// On-disk JSON run configuration: architecture, training protocol, data
/// source and artifact directory. Unknown keys are rejected at every level
/// so a typo cannot silently fall back to a default.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Where metrics, summary and checkpoints land; required by `train`,
    /// ignored by `evaluate`. [`OUTPUT_ENV`] overrides it.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Where the samples come from: a directory of volumes with a sidecar
/// labels table, or a procedural phantom request. Exactly one source.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of `.nii` / `.nii.gz` time-series volumes.
    #[serde(default)]
    pub nifti_dir: Option<PathBuf>,
    /// `subject_id,label` table; required alongside `nifti_dir`.
    #[serde(default)]
    pub labels_csv: Option<PathBuf>,
    /// Procedural phantom dataset request.
    #[serde(default)]
    pub phantom: Option<PhantomSpec>,
    /// Fraction of each class assigned to the training split.
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    /// Seed of the stratified split shuffle; defaults to `train.seed`.
    #[serde(default)]
    pub split_seed: Option<u64>,
}

fn default_split_ratio() -> f64 {
    0.5
}

/// Parse and structurally validate a run configuration. Everything here is
/// a configuration error (exit 2); whether referenced files exist is
/// checked later, against the data-error exit code.
pub fn load_config(path: &Path) -> Result<RunConfigFile, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: RunConfigFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
    validate_config(&cfg)?;
    Ok(cfg)
}

/// Cross-field rules a plain schema cannot express.
pub fn validate_config(cfg: &RunConfigFile) -> Result<(), CliError> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    let d = &cfg.data;
    if !(d.split_ratio > 0.0 && d.split_ratio < 1.0) {
        return Err(CliError::Config(format!(
            "split_ratio must lie strictly between 0 and 1, got {}",
            d.split_ratio
        )));
    }
    match (&d.nifti_dir, &d.phantom) {
        (Some(_), Some(_)) => Err(CliError::Config(
            "config names both nifti_dir and phantom; pick one data source".into(),
        )),
        (None, None) => Err(CliError::Config(
            "config names no data source; set nifti_dir or phantom".into(),
        )),
        (Some(_), None) => {
            if d.labels_csv.is_none() {
                return Err(CliError::Config(
                    "nifti_dir requires labels_csv for the class labels".into(),
                ));
            }
            if cfg.model.modality == Modality::Multi {
                return Err(CliError::Config(
                    "multi-modal training needs a structural volume per subject, which a \
                     volume directory does not carry; use a phantom source"
                        .into(),
                ));
            }
            Ok(())
        }
        (None, Some(p)) => {
            if d.labels_csv.is_some() {
                return Err(CliError::Config(
                    "labels_csv only applies to nifti_dir sources; phantom labels are generated"
                        .into(),
                ));
            }
            if p.count < 2 {
                return Err(CliError::Config(format!(
                    "phantom.count must be at least 2 to form a train/validation split, got {}",
                    p.count
                )));
            }
            if !(0.0..=1.0).contains(&p.delta) {
                return Err(CliError::Config(format!(
                    "phantom.delta must lie in [0, 1], got {}",
                    p.delta
                )));
            }
            Ok(())
        }
    }
}

/// The configured output directory with the CI override applied.
pub fn resolve_output_dir(configured: Option<&Path>) -> Option<PathBuf> {
    match std::env::var_os(OUTPUT_ENV) {
        Some(v) if !v.is_empty() => Some(PathBuf::from(v)),
        _ => configured.map(Path::to_path_buf),
    }
}

/// Create `dir` if needed and prove it accepts writes before any compute
/// starts, by creating and removing a probe file inside it.
pub fn ensure_writable_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| {
        CliError::Data(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| {
        CliError::Data(format!("output directory {} is not writable: {e}", dir.display()))
    })?;
    let _ = fs::remove_file(&probe);
    Ok(())
}

// ───────────────────────────── dataset assembly ─────────────────────────────

/// A conformed dataset together with its stratified split.
pub struct LoadedData {
    pub data: Dataset,
    pub plan: SplitPlan,
}

/// Existence checks for every configured input path, before any data is
/// generated or decoded.
fn check_paths(cfg: &RunConfigFile) -> Result<(), CliError> {
    if let Some(dir) = &cfg.data.nifti_dir {
        if !dir.is_dir() {
            return Err(CliError::Data(format!(
                "volume directory not found: {}",
                dir.display()
            )));
        }
        let csv = cfg.data.labels_csv.as_ref().expect("validated with nifti_dir");
        if !csv.is_file() {
            return Err(CliError::Data(format!(
                "labels CSV not found: {}",
                csv.display()
            )));
        }
    }
    Ok(())
}

/// Produce the conformed dataset and split plan the configuration asks
/// for. Input dimensions come from the model spec, so whatever the source
/// resolution, the samples fit the network.
pub fn assemble(cfg: &RunConfigFile) -> Result<LoadedData, CliError> {
    check_paths(cfg)?;
    let fmri_dims = cfg.model.fmri_input.dims();
    let (t_len, spatial) = (fmri_dims[0], fmri_dims[1]);
    let mri_spatial = cfg
        .model
        .mri_input
        .as_ref()
        .map(|s| s.dims()[0])
        .unwrap_or(PHANTOM_MRI_DIMS[0]);

    let data = if let Some(p) = &cfg.data.phantom {
        let pairs = generate_phantom_dataset(p.count, p.delta, p.seed);
        let (fmris, mris): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let mris = match cfg.model.modality {
            Modality::Multi => Some(mris),
            Modality::Single => None,
        };
        Dataset::build(fmris, mris, t_len, spatial, mri_spatial)?
    } else {
        let dir = cfg.data.nifti_dir.as_ref().expect("validated source");
        let csv = cfg.data.labels_csv.as_ref().expect("validated with nifti_dir");
        let labels = load_labels_csv(csv)?;
        let fmris = load_nifti_dataset(dir, &labels)?;
        Dataset::build(fmris, None, t_len, spatial, mri_spatial)?
    };

    let labels = data.labels();
    let split_seed = cfg.data.split_seed.unwrap_or(cfg.train.seed);
    let plan = make_splits(data.len(), Some(&labels), cfg.data.split_ratio, split_seed)?;
    Ok(LoadedData { data, plan })
}
