//! Dataset assembly: labels, volume loading, train/validation splits,
//! and per-epoch batch schedules.
//!
//! Splits and batch orders are index-based and fully seeded, so a run is
//! reproducible from its configuration alone. Labels for real data come
//! from a sidecar CSV with the exact header `subject_id,label`; volumes
//! are matched to labels by file stem.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::tensor::Tensor;
use crate::util::seeded_rng;

use super::resample::{conform_fmri, conform_mri};
use super::{DataError, Volume3D, Volume4D, VolumeSource};

/// One network-ready sample: conformed tensors plus identity.
#[derive(Debug, Clone)]
pub struct Sample {
    pub subject_id: String,
    pub label: u8,
    /// `[T, S, S, S, 1]` functional series.
    pub fmri: Tensor<f32>,
    /// `[M, M, M, 1]` structural volume, present for multi-modal input.
    pub mri: Option<Tensor<f32>>,
}

/// An in-memory dataset of conformed samples.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Conforms raw volumes into a dataset. Structural volumes, when
    /// given, pair with the functional series by index (both sides are
    /// expected in the same subject order) and are resampled to
    /// `mri_spatial^3`; the functional series go to `t_len` frames of
    /// `spatial^3`.
    pub fn build(
        fmris: Vec<Volume4D>,
        mris: Option<Vec<Volume3D>>,
        t_len: usize,
        spatial: usize,
        mri_spatial: usize,
    ) -> Result<Dataset, DataError> {
        if fmris.is_empty() {
            return Err(DataError::EmptyInput("no functional volumes"));
        }
        if let Some(m) = &mris {
            if m.len() != fmris.len() {
                return Err(DataError::BadSample {
                    id: "<dataset>".into(),
                    msg: format!(
                        "{} functional volumes but {} structural volumes",
                        fmris.len(),
                        m.len()
                    ),
                });
            }
        }
        let mut samples = Vec::with_capacity(fmris.len());
        for (i, vol) in fmris.into_iter().enumerate() {
            let fmri = conform_fmri(&vol.data, t_len, spatial)?;
            let mri = match &mris {
                Some(m) => Some(conform_mri(&m[i].data, mri_spatial)?),
                None => None,
            };
            samples.push(Sample {
                subject_id: vol.subject_id,
                label: vol.label,
                fmri,
                mri,
            });
        }
        Ok(Dataset { samples })
    }
}

/// A reproducible train/validation split over sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub seed: u64,
}

/// Splits `0..n` into train/validation index lists.
///
/// Unlabeled: one seeded shuffle, cut at `round(ratio * n)`. With labels,
/// the split is stratified: each class (ascending label order) is
/// shuffled and cut at `round(ratio * n_class)` separately, then the two
/// sides are shuffled again so classes interleave. Needs at least two
/// samples.
pub fn make_splits(
    n: usize,
    labels: Option<&[u8]>,
    ratio: f64,
    seed: u64,
) -> Result<SplitPlan, DataError> {
    if n < 2 {
        return Err(DataError::EmptyInput("need at least 2 samples to split"));
    }
    if let Some(ls) = labels {
        assert_eq!(ls.len(), n, "labels length must match sample count");
    }
    let mut rng = seeded_rng(seed);
    let cut = |k: usize| (ratio * k as f64).round() as usize;

    let (mut train, mut val) = match labels {
        None => {
            let mut ids: Vec<usize> = (0..n).collect();
            ids.shuffle(&mut rng);
            let c = cut(n).min(n);
            let val = ids.split_off(c);
            (ids, val)
        }
        Some(ls) => {
            let mut classes: Vec<u8> = ls.iter().copied().collect::<HashSet<_>>().into_iter().collect();
            classes.sort_unstable();
            let mut train = Vec::new();
            let mut val = Vec::new();
            for c in classes {
                let mut ids: Vec<usize> =
                    (0..n).filter(|&i| ls[i] == c).collect();
                ids.shuffle(&mut rng);
                let k = cut(ids.len()).min(ids.len());
                val.extend_from_slice(&ids[k..]);
                train.extend_from_slice(&ids[..k]);
            }
            (train, val)
        }
    };
    if labels.is_some() {
        train.shuffle(&mut rng);
        val.shuffle(&mut rng);
    }
    Ok(SplitPlan {
        train_ids: train,
        val_ids: val,
        seed,
    })
}

/// Training batches for one epoch: a fresh seeded shuffle of the train
/// ids, chunked into `batch_size` groups with the short final batch kept.
pub fn train_batches(plan: &SplitPlan, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut ids = plan.train_ids.clone();
    ids.shuffle(&mut seeded_rng(epoch_seed));
    ids.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Validation batches: fixed plan order, never reshuffled.
pub fn val_batches(plan: &SplitPlan, batch_size: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    plan.val_ids
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect()
}

/// Parses a labels CSV with the exact header `subject_id,label`; labels
/// must be 0 or 1, ids must be unique and non-empty. Returns pairs in
/// file order.
pub fn load_labels_csv(path: &Path) -> Result<Vec<(String, u8)>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut lines = text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l));
    match lines.next() {
        Some("subject_id,label") => {}
        Some(other) => {
            return Err(DataError::LabelsCsv(format!(
                "expected header \"subject_id,label\", got \"{other}\""
            )))
        }
        None => return Err(DataError::LabelsCsv("empty labels file".into())),
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (id, label) = match (parts.next(), parts.next(), parts.next()) {
            (Some(id), Some(label), None) => (id.trim(), label.trim()),
            _ => {
                return Err(DataError::LabelsCsv(format!(
                    "line {}: expected exactly 2 comma-separated fields, got \"{line}\"",
                    lineno + 2
                )))
            }
        };
        if id.is_empty() {
            return Err(DataError::LabelsCsv(format!(
                "line {}: empty subject_id",
                lineno + 2
            )));
        }
        let label: u8 = match label {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(DataError::LabelsCsv(format!(
                    "line {}: label must be 0 or 1, got \"{other}\"",
                    lineno + 2
                )))
            }
        };
        if !seen.insert(id.to_string()) {
            return Err(DataError::LabelsCsv(format!(
                "line {}: duplicate subject_id \"{id}\"",
                lineno + 2
            )));
        }
        out.push((id.to_string(), label));
    }
    if out.is_empty() {
        return Err(DataError::LabelsCsv("no label rows".into()));
    }
    Ok(out)
}

fn volume_stem(name: &str) -> Option<&str> {
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
}

/// Loads every `.nii` / `.nii.gz` file in `dir` (sorted by file name) and
/// attaches labels by file stem. Every volume must have a label and every
/// label a volume; anything else is a hard error so datasets cannot
/// silently shrink.
pub fn load_nifti_dataset(
    dir: &Path,
    labels: &[(String, u8)],
) -> Result<Vec<Volume4D>, DataError> {
    let rd = std::fs::read_dir(dir).map_err(|e| DataError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut names: Vec<String> = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| DataError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if volume_stem(&name).is_some() {
            names.push(name);
        }
    }
    if names.is_empty() {
        return Err(DataError::EmptyInput("no .nii / .nii.gz files in directory"));
    }
    names.sort_unstable();

    let label_of: HashMap<&str, u8> =
        labels.iter().map(|(id, l)| (id.as_str(), *l)).collect();
    let mut seen: HashSet<&str> = HashSet::new();
    let mut out = Vec::with_capacity(names.len());
    for name in &names {
        let stem = volume_stem(name).expect("filtered above");
        let label = *label_of.get(stem).ok_or_else(|| DataError::BadSample {
            id: stem.to_string(),
            msg: "volume file has no row in the labels CSV".into(),
        })?;
        seen.insert(stem);
        let (_, data) = super::nifti::read_nifti_file(&dir.join(name))?;
        out.push(Volume4D {
            data,
            subject_id: stem.to_string(),
            label,
            source: VolumeSource::Nifti,
        });
    }
    for (id, _) in labels {
        if !seen.contains(id.as_str()) {
            return Err(DataError::BadSample {
                id: id.clone(),
                msg: "labels CSV row has no volume file".into(),
            });
        }
    }
    Ok(out)
}
