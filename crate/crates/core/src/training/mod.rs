//! Adam optimization, binary cross-entropy, accuracy, and the epoch loop.
//!
//! The protocol: for each repeat, reinitialize the model from a derived
//! seed (`config.seed + repeat_index`), run `epochs` epochs of micro-batch
//! training (mean loss over the batch, one Adam step per batch), and after
//! every epoch record evaluation-mode metrics on both splits. Repeats with
//! a non-finite loss are aborted, reported, and excluded from averages;
//! the remaining repeats still run.
//!
//! Determinism: everything is keyed off `TrainConfig.seed` — model
//! initialization (stream 0 of the derived seed), dropout masks (streams
//! 1 and up, one per sample presentation), and the per-epoch batch
//! shuffle. With one worker thread the metrics stream, the summary, and
//! the checkpoint reproduce bitwise. Optimizer and batch-norm running
//! statistics are carried in f64 regardless of the model precision.
//!
//! Artifacts (when an output directory is given): `metrics.csv` with one
//! row per epoch per repeat, `summary.json` with per-epoch means across
//! completed repeats, and the best-validation-accuracy checkpoint under
//! `checkpoint_best/`.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, BCE_EPS};
use crate::data::{DataError, Dataset, SplitPlan};
use crate::layers::{update_running, BN_MOMENTUM};
use crate::models::{
    build_model, record_batch, save_model, CheckpointError, DropoutPlan, Modality, Model,
    ModelError, ModelSpec, RecordMode, SampleRef,
};
use crate::tensor::{Scalar, Tensor, TensorError};
use crate::util::fmt_float;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS_HAT: f64 = 1e-8;
/// Learning rate of the reference protocol.
pub const DEFAULT_LR: f64 = 1e-5;

/// Exact header of the metrics CSV.
pub const METRICS_HEADER: &str = "run_id,epoch,train_loss,train_acc,val_loss,val_acc,wall_time_s";
/// File names written under the output directory.
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoint_best";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("optimizer misalignment at slot {slot}: parameter {param} vs gradient {grad}")]
    GradMisaligned {
        slot: usize,
        param: String,
        grad: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("summary serialization: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ───────────────────────────── configuration ─────────────────────────────

fn default_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    3
}
fn default_dropout() -> f64 {
    0.3
}
fn default_repeats() -> usize {
    5
}
fn default_seed() -> u64 {
    42
}
fn default_lr() -> f64 {
    DEFAULT_LR
}

/// Training protocol knobs. The defaults are the reference protocol:
/// 10 epochs, batch 3, dropout 0.3, 5 repeats, Adam at 1e-5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Record wall times as 0 so two identical runs produce bitwise-equal
    /// artifacts. Set by the single-threaded reproducibility mode.
    #[serde(default)]
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            dropout: default_dropout(),
            repeats: default_repeats(),
            seed: default_seed(),
            lr: default_lr(),
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.repeats == 0 {
            return Err(TrainError::InvalidConfig("repeats must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::InvalidConfig(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

// ───────────────────────────── loss & metric ─────────────────────────────

/// Binary cross-entropy of one probability against a 0/1 label, with the
/// probability clamped to `[1e-7, 1 - 1e-7]` first. Matches the loss node
/// the tape records, so reported losses and optimized losses agree.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
}

/// Fraction of correct thresholded predictions; `p >= 0.5` predicts
/// class 1 (the boundary counts as positive).
pub fn accuracy(probs: &[f64], labels: &[u8]) -> Result<f64, TrainError> {
    if probs.is_empty() {
        return Err(TrainError::EmptyInput("accuracy of no predictions"));
    }
    assert_eq!(
        probs.len(),
        labels.len(),
        "probability and label counts must match"
    );
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p >= 0.5) == (y == 1))
        .count();
    Ok(correct as f64 / probs.len() as f64)
}

// ───────────────────────────── optimizer ─────────────────────────────

/// Adam state over the canonical parameter list. Moments are stored and
/// updated in f64 so the optimizer trajectory does not depend on the
/// model precision.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
    pub t: u64,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
    /// Canonical parameter names, for alignment checks.
    names: Vec<String>,
}

impl AdamState {
    /// Fresh state (zero moments, t = 0) mirroring `model`'s parameters.
    pub fn for_model<T: Scalar>(model: &Model<T>, lr: f64) -> AdamState {
        let named = model.named_params();
        AdamState {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps_hat: ADAM_EPS_HAT,
            t: 0,
            m: named
                .iter()
                .map(|(_, p)| Tensor::zeros(p.shape().clone()))
                .collect(),
            v: named
                .iter()
                .map(|(_, p)| Tensor::zeros(p.shape().clone()))
                .collect(),
            names: named.into_iter().map(|(n, _)| n).collect(),
        }
    }

    /// One Adam update: `t += 1`, moment updates, bias correction, then
    /// `p -= lr * m_hat / (sqrt(v_hat) + eps_hat)`. Parameters and
    /// gradients must arrive in the canonical order this state was built
    /// from.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut [(String, &mut Tensor<T>)],
        grads: &[(String, Tensor<T>)],
    ) -> Result<(), TrainError> {
        if params.len() != self.names.len() || grads.len() != self.names.len() {
            return Err(TrainError::GradMisaligned {
                slot: usize::MAX,
                param: format!("{} params", params.len()),
                grad: format!("{} grads for {} slots", grads.len(), self.names.len()),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, ((pname, param), (gname, grad))) in
            params.iter_mut().zip(grads.iter()).enumerate()
        {
            if pname != gname
                || pname != &self.names[i]
                || param.shape() != grad.shape()
                || param.shape() != self.m[i].shape()
            {
                return Err(TrainError::GradMisaligned {
                    slot: i,
                    param: format!("{pname} {}", param.shape()),
                    grad: format!("{gname} {}", grad.shape()),
                });
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = param.data_mut();
            let g = grad.data();
            for e in 0..p.len() {
                let ge = g[e].as_f64();
                m[e] = self.beta1 * m[e] + (1.0 - self.beta1) * ge;
                v[e] = self.beta2 * v[e] + (1.0 - self.beta2) * ge * ge;
                let m_hat = m[e] / bc1;
                let v_hat = v[e] / bc2;
                p[e] = T::of_f64(p[e].as_f64() - self.lr * m_hat / (v_hat.sqrt() + self.eps_hat));
            }
        }
        Ok(())
    }
}

// ───────────────────────────── metrics ─────────────────────────────

/// One epoch of one repeat, as written to the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_time_s: f64,
}

impl MetricsRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.run_id,
            self.epoch,
            fmt_float(self.train_loss),
            fmt_float(self.train_acc),
            fmt_float(self.val_loss),
            fmt_float(self.val_acc),
            fmt_float(self.wall_time_s),
        )
    }
}

/// Renders rows as the metrics CSV (header + one line per row).
pub fn metrics_csv_string(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), TrainError> {
    std::fs::write(path, metrics_csv_string(rows)).map_err(|e| io_err(path, e))
}

/// Per-epoch gradient evidence: L2 norms of the gradients flowing into
/// each part of the model, accumulated over the epoch's batches. Nonzero
/// branch norms show the fusion actually propagates signal.
#[derive(Debug, Clone, Serialize)]
pub struct EpochDiag {
    pub epoch: usize,
    pub fmri_grad_norm: f64,
    pub mri_grad_norm: f64,
    pub head_grad_norm: f64,
}

/// Where and how a repeat died when its loss left the finite range.
#[derive(Debug, Clone, Serialize)]
pub struct AbortedRepeat {
    pub run_id: String,
    pub epoch: usize,
    pub batch: usize,
    /// Textual loss value ("NaN", "inf", ...), kept as a string because
    /// JSON has no encoding for non-finite numbers.
    pub loss: String,
}

/// Everything one repeat produced.
#[derive(Debug, Clone)]
pub struct RepeatResult {
    pub run_id: String,
    pub rows: Vec<MetricsRow>,
    pub diags: Vec<EpochDiag>,
    pub aborted: Option<AbortedRepeat>,
}

/// Mean metrics at one epoch across completed repeats.
#[derive(Debug, Clone, Serialize)]
pub struct EpochMean {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Best validation accuracy seen anywhere in the run.
#[derive(Debug, Clone, Serialize)]
pub struct BestRef {
    pub run_id: String,
    pub epoch: usize,
    pub val_acc: f64,
}

/// Contents of `summary.json`: the configuration that ran (including the
/// configured learning rate) and per-epoch means across completed
/// repeats. Aborted repeats are listed and excluded from every mean.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub model: String,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub repeats: usize,
    pub seed: u64,
    pub completed_repeats: usize,
    pub aborted: Vec<AbortedRepeat>,
    pub epoch_means: Vec<EpochMean>,
    pub final_val_acc_mean: Option<f64>,
    pub best: Option<BestRef>,
}

/// The in-memory result of [`train`]; the same content goes to disk when
/// an output directory is given.
#[derive(Debug)]
pub struct TrainOutcome {
    pub repeats: Vec<RepeatResult>,
    pub summary: Summary,
}

impl TrainOutcome {
    /// All metrics rows across repeats, in run order.
    pub fn all_rows(&self) -> Vec<MetricsRow> {
        self.repeats.iter().flat_map(|r| r.rows.clone()).collect()
    }
}

/// Short architecture name, e.g. `sm-gru` or `mm-lstm`; used as the
/// `model` field of [`Summary`] and by reporting tools.
pub fn spec_name(spec: &ModelSpec) -> String {
    let m = match spec.modality {
        Modality::Single => "sm",
        Modality::Multi => "mm",
    };
    format!("{m}-{}", spec.rnn_kind.name())
}

// ───────────────────────────── evaluation ─────────────────────────────

/// Mean loss and accuracy of `model` over the given sample indices, in
/// evaluation mode (running batch-norm statistics, no dropout).
pub fn evaluate_split<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    ids: &[usize],
) -> Result<(f64, f64), TrainError>
where
    Dataset: SampleView<T>,
{
    if ids.is_empty() {
        return Err(TrainError::EmptyInput("evaluation over an empty split"));
    }
    let mut probs = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    let mut loss = 0.0f64;
    for &id in ids {
        let (fmri, mri, label) = data.sample_view(id);
        let mri = match model.spec.modality {
            Modality::Multi => mri,
            Modality::Single => None,
        };
        let p = model
            .forward(fmri, mri, crate::models::ForwardMode::Eval)?
            .as_f64();
        loss += bce_loss(p, label as f64);
        probs.push(p);
        labels.push(label);
    }
    let acc = accuracy(&probs, &labels)?;
    Ok((loss / ids.len() as f64, acc))
}

/// Single-row evaluation of a model over one split. The split's metrics
/// fill the validation columns; the training columns carry NaN because no
/// training split was involved.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    ids: &[usize],
    run_id: &str,
) -> Result<MetricsRow, TrainError>
where
    Dataset: SampleView<T>,
{
    let (loss, acc) = evaluate_split(model, data, ids)?;
    Ok(MetricsRow {
        run_id: run_id.to_string(),
        epoch: 0,
        train_loss: f64::NAN,
        train_acc: f64::NAN,
        val_loss: loss,
        val_acc: acc,
        wall_time_s: 0.0,
    })
}

/// Precision-bridging view of dataset samples. The stored tensors are
/// f32; an f64 view materializes casts (used only by small-scale tests).
pub trait SampleView<T: Scalar> {
    fn sample_view(&self, id: usize) -> (&Tensor<T>, Option<&Tensor<T>>, u8);
}

impl SampleView<f32> for Dataset {
    fn sample_view(&self, id: usize) -> (&Tensor<f32>, Option<&Tensor<f32>>, u8) {
        let s = &self.samples[id];
        (&s.fmri, s.mri.as_ref(), s.label)
    }
}

// ───────────────────────────── training loop ─────────────────────────────

fn branch_of(name: &str) -> usize {
    if name.starts_with("mri.") {
        1
    } else if name.starts_with("output.") {
        2
    } else {
        0
    }
}

/// Distinct shuffle seed for every (repeat, epoch) of a run.
fn epoch_shuffle_seed(base: u64, repeat: usize, epoch: usize) -> u64 {
    base.wrapping_add(repeat as u64 * 10_000)
        .wrapping_add(epoch as u64)
        .wrapping_add(1)
}

/// Runs the full training protocol for `spec` on the dataset split.
///
/// Per repeat `r`: the model is rebuilt from seed `config.seed + r`,
/// trained for `config.epochs` epochs of shuffled micro-batches (mean
/// batch loss, one Adam step per batch, batch-norm running statistics
/// blended after every batch), and measured after each epoch in
/// evaluation mode on both splits. The best-validation model across all
/// repeats is kept (first reaching the maximum wins) and written as a
/// checkpoint when `out_dir` is given, together with `metrics.csv` and
/// `summary.json`. A zero-epoch configuration yields no metrics and
/// checkpoints the initialization.
///
/// `progress` is invoked once per completed epoch with the fresh metrics
/// row, for live reporting; it sees exactly what lands in the CSV.
pub fn train(
    spec: &ModelSpec,
    config: &TrainConfig,
    data: &Dataset,
    plan: &SplitPlan,
    out_dir: Option<&Path>,
    mut progress: Option<&mut dyn FnMut(&MetricsRow)>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    for &id in plan.train_ids.iter().chain(&plan.val_ids) {
        if id >= data.len() {
            return Err(TrainError::InvalidConfig(format!(
                "split references sample {id} but the dataset has {}",
                data.len()
            )));
        }
    }
    if plan.train_ids.is_empty() {
        return Err(TrainError::EmptyInput("training split is empty"));
    }

    let mut best: Option<(f64, Model<f32>, String, usize)> = None;
    let mut repeats_out: Vec<RepeatResult> = Vec::with_capacity(config.repeats);

    for r in 0..config.repeats {
        let run_id = format!("r{}", r + 1);
        let mut mspec = spec.clone();
        mspec.seed = config.seed + r as u64;
        mspec.dropout = config.dropout;
        let mut model = build_model::<f32>(&mspec)?;
        if best.is_none() {
            // Degenerate zero-epoch runs still persist a checkpoint: the
            // first repeat's initialization, never replaced unless some
            // epoch beats a negative sentinel accuracy.
            best = Some((-1.0, model.clone(), run_id.clone(), 0));
        }
        let mut adam = AdamState::for_model(&model, config.lr);
        // Dropout mask streams start at 1: stream 0 of the same seed drew
        // the initial parameters.
        let mut dropout_call: u64 = 1;
        let mut rows = Vec::with_capacity(config.epochs);
        let mut diags = Vec::with_capacity(config.epochs);
        let mut aborted = None;

        'epochs: for epoch in 1..=config.epochs {
            let started = Instant::now();
            let batches = crate::data::train_batches(
                plan,
                config.batch_size,
                epoch_shuffle_seed(config.seed, r, epoch),
            );
            let mut norms2 = [0.0f64; 3];
            for (bi, batch) in batches.iter().enumerate() {
                let samples: Vec<SampleRef<'_, f32>> = batch
                    .iter()
                    .map(|&id| {
                        let s = &data.samples[id];
                        SampleRef {
                            fmri: &s.fmri,
                            mri: match model.spec.modality {
                                Modality::Multi => s.mri.as_ref(),
                                Modality::Single => None,
                            },
                            label: s.label as f64,
                        }
                    })
                    .collect();
                let dropout = if config.dropout > 0.0 {
                    Some(DropoutPlan {
                        rate: config.dropout,
                        seed: mspec.seed,
                        call: dropout_call,
                    })
                } else {
                    None
                };
                dropout_call += batch.len() as u64;

                let mut rec =
                    record_batch(&model, &samples, &RecordMode::Train { dropout }, false)?;
                let loss = rec.tape.value(rec.loss)?.item()?.as_f64();
                if !loss.is_finite() {
                    aborted = Some(AbortedRepeat {
                        run_id: run_id.clone(),
                        epoch,
                        batch: bi + 1,
                        loss: fmt_float(loss),
                    });
                    break 'epochs;
                }

                rec.tape.backward_release(rec.loss)?;
                let mut grads: Vec<(String, Tensor<f32>)> = Vec::with_capacity(rec.params.len());
                for (name, id) in &rec.params {
                    let g = rec.tape.param_grad(*id)?;
                    let b = branch_of(name);
                    norms2[b] += g.data().iter().map(|v| {
                        let x = v.as_f64();
                        x * x
                    }).sum::<f64>();
                    grads.push((name.clone(), g));
                }
                // Blend this batch's normalization statistics into the
                // running buffers (pre-update parameters produced them).
                for tap in &rec.bn_taps {
                    let (mean, var) = rec
                        .tape
                        .batchnorm_stats(tap.node)?
                        .expect("tap points at a batch-norm node");
                    let block = model.conv_block_mut(tap.block);
                    block.running_mean = update_running(&block.running_mean, &mean, BN_MOMENTUM);
                    block.running_var = update_running(&block.running_var, &var, BN_MOMENTUM);
                }
                drop(rec);

                let mut params = model.named_params_mut();
                adam.step(&mut params, &grads)?;
            }

            let (train_loss, train_acc) = evaluate_split(&model, data, &plan.train_ids)?;
            let (val_loss, val_acc) = if plan.val_ids.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                evaluate_split(&model, data, &plan.val_ids)?
            };
            let wall = if config.deterministic {
                0.0
            } else {
                started.elapsed().as_secs_f64()
            };
            let row = MetricsRow {
                run_id: run_id.clone(),
                epoch,
                train_loss,
                train_acc,
                val_loss,
                val_acc,
                wall_time_s: wall,
            };
            if let Some(report) = progress.as_deref_mut() {
                report(&row);
            }
            rows.push(row);
            diags.push(EpochDiag {
                epoch,
                fmri_grad_norm: norms2[0].sqrt(),
                mri_grad_norm: norms2[1].sqrt(),
                head_grad_norm: norms2[2].sqrt(),
            });
            if val_acc.is_finite() {
                let current_best = best.as_ref().map(|(a, ..)| *a).unwrap_or(-1.0);
                if val_acc > current_best {
                    best = Some((val_acc, model.clone(), run_id.clone(), epoch));
                }
            }
        }

        repeats_out.push(RepeatResult {
            run_id,
            rows,
            diags,
            aborted,
        });
    }

    let summary = summarize(spec, config, &repeats_out, best.as_ref());

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_metrics_csv(
            &dir.join(METRICS_FILE),
            &repeats_out
                .iter()
                .flat_map(|r| r.rows.clone())
                .collect::<Vec<_>>(),
        )?;
        let json = serde_json::to_string_pretty(&summary)?;
        let spath = dir.join(SUMMARY_FILE);
        std::fs::write(&spath, json + "\n").map_err(|e| io_err(&spath, e))?;
        if let Some((_, model, _, _)) = &best {
            save_model(model, &dir.join(CHECKPOINT_DIR))?;
        }
    }

    Ok(TrainOutcome {
        repeats: repeats_out,
        summary,
    })
}

fn summarize(
    spec: &ModelSpec,
    config: &TrainConfig,
    repeats: &[RepeatResult],
    best: Option<&(f64, Model<f32>, String, usize)>,
) -> Summary {
    let completed: Vec<&RepeatResult> =
        repeats.iter().filter(|r| r.aborted.is_none()).collect();
    let mut epoch_means = Vec::new();
    if !completed.is_empty() {
        for e in 0..config.epochs {
            let rows: Vec<&MetricsRow> = completed.iter().map(|r| &r.rows[e]).collect();
            let n = rows.len() as f64;
            epoch_means.push(EpochMean {
                epoch: e + 1,
                train_loss: rows.iter().map(|r| r.train_loss).sum::<f64>() / n,
                train_acc: rows.iter().map(|r| r.train_acc).sum::<f64>() / n,
                val_loss: rows.iter().map(|r| r.val_loss).sum::<f64>() / n,
                val_acc: rows.iter().map(|r| r.val_acc).sum::<f64>() / n,
            });
        }
    }
    let final_val_acc_mean = epoch_means.last().map(|m| m.val_acc);
    let best = best.and_then(|(acc, _, run_id, epoch)| {
        (*acc >= 0.0).then(|| BestRef {
            run_id: run_id.clone(),
            epoch: *epoch,
            val_acc: *acc,
        })
    });
    Summary {
        model: spec_name(spec),
        lr: config.lr,
        epochs: config.epochs,
        batch_size: config.batch_size,
        dropout: config.dropout,
        repeats: config.repeats,
        seed: config.seed,
        completed_repeats: completed.len(),
        aborted: repeats.iter().filter_map(|r| r.aborted.clone()).collect(),
        epoch_means,
        final_val_acc_mean,
        best,
    }
}
