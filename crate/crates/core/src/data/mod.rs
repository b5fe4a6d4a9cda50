//! Data ingestion and preparation.
//!
//! Four concerns live here:
//! - [`nifti`]: reading (and, for round-trip tests and golden files,
//!   writing) single-file NIfTI-1 volumes, optionally gzip-compressed;
//! - [`resample`]: trilinear spatial resampling, temporal standardization
//!   to a fixed number of frames, and z-normalization — the chain that
//!   conforms any input volume to a network's expected input shape;
//! - [`phantom`]: the seeded procedural generator that produces structured
//!   synthetic MRI volumes and 4D fMRI-like sequences with a planted,
//!   tunable class signal;
//! - [`dataset`]: label CSV parsing, train/validation splitting and
//!   batching.
//!
//! All randomness is `ChaCha8` seeded through [`crate::util`], so every
//! artifact this module produces is a pure function of its seeds.

mod dataset;
mod nifti;
mod phantom;
mod resample;

pub use dataset::{
    load_labels_csv, load_nifti_dataset, make_splits, train_batches, val_batches, Dataset,
    Sample, SplitPlan,
};
pub use nifti::{read_nifti, read_nifti_auto, read_nifti_file, write_nifti, NiftiError, NiftiHeader};
pub use phantom::{
    generate_phantom_dataset, generate_phantom_fmri, generate_phantom_mri, PhantomSpec,
    DEFAULT_SEPARATION, PHANTOM_FMRI_DIMS, PHANTOM_MRI_DIMS,
};
pub use resample::{
    conform_fmri, conform_mri, resample_trilinear, standardize_time, znormalize, STANDARD_FRAMES,
};

use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

/// Errors for volume preparation and dataset assembly.
#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{side} axis {axis} has extent {extent}; resampling needs at least 2")]
    DegenerateAxis {
        side: &'static str,
        axis: usize,
        extent: usize,
    },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("labels file: {0}")]
    LabelsCsv(String),
    #[error("sample {id}: {msg}")]
    BadSample { id: String, msg: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Where a volume came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeSource {
    Nifti,
    Phantom,
}

/// A 4D acquisition: `[T, D, H, W, 1]` voxel data plus its label.
/// Label 0 is the control class, 1 the condition class.
#[derive(Debug, Clone)]
pub struct Volume4D {
    pub data: Tensor<f32>,
    pub subject_id: String,
    pub label: u8,
    pub source: VolumeSource,
}

/// A single structural volume: `[D, H, W, 1]` voxel data, z-normalized.
#[derive(Debug, Clone)]
pub struct Volume3D {
    pub data: Tensor<f32>,
    pub seed: u64,
    pub source: VolumeSource,
}
