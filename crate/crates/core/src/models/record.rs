//! Recording a micro-batch onto the autodiff tape.
//!
//! One tape carries the whole micro-batch: parameters are registered once and
//! shared across the per-sample chains, so gradient accumulation over the
//! batch falls out of ordinary reverse-mode accumulation. The batch loss is
//! the mean of the per-sample binary cross-entropies.
//!
//! Recording is layer-synchronous across samples so that training-mode batch
//! norm can see the whole micro-batch: each block records conv → relu →
//! pool for every sample and timestep, stacks the results into one tensor,
//! normalizes the stack (statistics over batch, time, and space per channel,
//! differentiated through), and slices it back apart.
//!
//! Large intermediate values that no backward rule reads (conv outputs once
//! relu is recorded, slice/stack scaffolding) are released as soon as they
//! are consumed, which keeps peak memory near the size of the retained relu
//! activations.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::sync::Arc;

use crate::autodiff::check::{finite_diff_check_guarded, CheckReport};
use crate::autodiff::{NodeId, Tape, BCE_EPS};
use crate::layers::{dropout_mask, Activation, BN_EPS};
use crate::recurrent::RnnParams;
use crate::tensor::{Scalar, Shape, Tensor, TensorError};

use super::{build_model, BlockRef, Modality, Model, ModelError, ModelSpec};

/// Borrowed view of one labelled sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleRef<'a, T: Scalar> {
    pub fmri: &'a Tensor<T>,
    pub mri: Option<&'a Tensor<T>>,
    /// Binary class label, 0.0 or 1.0.
    pub label: f64,
}

/// Dropout configuration for one recorded batch. Sample `s` in the batch
/// draws its mask from stream `call + s`, so the caller must advance `call`
/// by at least the batch size between batches.
#[derive(Debug, Clone, Copy)]
pub struct DropoutPlan {
    pub rate: f64,
    pub seed: u64,
    pub call: u64,
}

/// How batch norm and dropout behave while recording.
#[derive(Debug, Clone, Copy)]
pub enum RecordMode {
    /// Batch-norm statistics from the micro-batch itself (differentiated
    /// through), optional dropout. This is the training path.
    Train { dropout: Option<DropoutPlan> },
    /// Running batch-norm statistics as constants, no dropout. Matches the
    /// pure eval forward bitwise.
    Frozen,
}

/// Batch-norm node recorded for one block, so the training loop can pull the
/// batch statistics out for running-average updates.
#[derive(Debug, Clone, Copy)]
pub struct BnTap {
    pub block: BlockRef,
    pub node: NodeId,
}

/// A fully recorded micro-batch, ready for `backward`.
pub struct BatchRecording<T: Scalar> {
    pub tape: Tape<T>,
    /// Mean of the per-sample losses.
    pub loss: NodeId,
    pub sample_losses: Vec<NodeId>,
    /// Forward probabilities, in sample order.
    pub probs: Vec<T>,
    /// Trainable parameter nodes with checkpoint names, in canonical order.
    pub params: Vec<(String, NodeId)>,
    /// One entry per conv block, in recording order.
    pub bn_taps: Vec<BnTap>,
    /// Hash of every branch decision (relu signs, pool argmaxes, loss
    /// clamping); only populated when requested. Two evaluations with equal
    /// signatures lie on the same smooth piece of the loss.
    pub kink_signature: u64,
}

struct Recorder<T: Scalar> {
    tape: Tape<T>,
    hasher: Option<DefaultHasher>,
    bn_taps: Vec<BnTap>,
}

impl<T: Scalar> Recorder<T> {
    fn hash_relu(&mut self, id: NodeId) -> Result<(), ModelError> {
        if self.hasher.is_none() {
            return Ok(());
        }
        // Pack the sign pattern 64 lanes per word before feeding the hasher.
        let mut word = 0u64;
        let mut bits = 0u32;
        let value = self.tape.value(id)?;
        let hasher = self.hasher.as_mut().expect("checked above");
        for &v in value.data() {
            word = (word << 1) | u64::from(v > T::zero());
            bits += 1;
            if bits == 64 {
                hasher.write_u64(word);
                word = 0;
                bits = 0;
            }
        }
        if bits > 0 {
            hasher.write_u64(word);
        }
        Ok(())
    }

    fn hash_argmax(&mut self, id: NodeId) -> Result<(), ModelError> {
        if self.hasher.is_none() {
            return Ok(());
        }
        let argmax = self
            .tape
            .pool_argmax(id)?
            .expect("id is a max-pool node");
        let hasher = self.hasher.as_mut().expect("checked above");
        for &i in argmax.iter() {
            hasher.write_u32(i);
        }
        Ok(())
    }

    fn hash_clamp_region(&mut self, p: f64) {
        if let Some(h) = self.hasher.as_mut() {
            let region: u8 = if p < BCE_EPS {
                0
            } else if p > 1.0 - BCE_EPS {
                2
            } else {
                1
            };
            h.write_u8(region);
        }
    }

    /// conv → relu → optional pool for one volume node. The conv output
    /// value is released once relu has consumed it: relu differentiates via
    /// its own output and conv via its inputs.
    fn conv_relu_pool(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        pooled: bool,
        first_block: bool,
    ) -> Result<NodeId, ModelError> {
        let c = if first_block {
            self.tape.conv3d_no_input_grad(x, kernel, bias)?
        } else {
            self.tape.conv3d(x, kernel, bias)?
        };
        let r = self.tape.relu(c)?;
        self.hash_relu(r)?;
        self.tape.release_value(c)?;
        if pooled {
            let p = self.tape.maxpool3d(r)?;
            self.hash_argmax(p)?;
            Ok(p)
        } else {
            Ok(r)
        }
    }

    /// Stack per-sample block outputs, batch-normalize the stack, and slice
    /// it back into per-sample nodes.
    fn batchnorm_across(
        &mut self,
        parts: &[NodeId],
        gamma: NodeId,
        beta: NodeId,
        block: BlockRef,
        mode: &RecordMode,
        running: Option<(Arc<Vec<f64>>, Arc<Vec<f64>>)>,
    ) -> Result<Vec<NodeId>, ModelError> {
        let batch = self.tape.stack(parts)?;
        let bn = match mode {
            RecordMode::Train { .. } => self.tape.batchnorm_train(batch, gamma, beta, BN_EPS)?,
            RecordMode::Frozen => {
                let (mean, var) = running.expect("running stats supplied in frozen mode");
                self.tape
                    .batchnorm_frozen(batch, gamma, beta, mean, var, BN_EPS)?
            }
        };
        self.bn_taps.push(BnTap { block, node: bn });
        let slices = (0..parts.len())
            .map(|s| self.tape.slice_time(bn, s))
            .collect::<Result<Vec<_>, _>>()?;
        // The stacked value must stay (batch-norm differentiates through its
        // input), but the normalized output lives on in the slices.
        self.tape.release_value(bn)?;
        Ok(slices)
    }
}

fn find<'r>(params: &'r [(String, NodeId)], name: &str) -> NodeId {
    params
        .iter()
        .find(|(n, _)| n == name)
        .unwrap_or_else(|| panic!("parameter {name} is always registered"))
        .1
}

/// Record one micro-batch against `model`, producing a tape whose `loss`
/// node is the mean binary cross-entropy over the samples.
///
/// `kink_hash` additionally folds every branch decision into
/// [`BatchRecording::kink_signature`]; it costs a pass over the activations
/// and is only needed by finite-difference checks.
pub fn record_batch<T: Scalar>(
    model: &Model<T>,
    samples: &[SampleRef<'_, T>],
    mode: &RecordMode,
    kink_hash: bool,
) -> Result<BatchRecording<T>, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let spec = &model.spec;
    for s in samples {
        if s.fmri.shape() != &spec.fmri_input {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "record_batch",
                left: s.fmri.shape().to_string(),
                right: spec.fmri_input.to_string(),
            }));
        }
        match (spec.modality, s.mri) {
            (Modality::Multi, Some(m)) => {
                let want = spec.mri_input.as_ref().expect("validated");
                if m.shape() != want {
                    return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                        op: "record_batch",
                        left: m.shape().to_string(),
                        right: want.to_string(),
                    }));
                }
            }
            (Modality::Multi, None) => {
                return Err(ModelError::MissingModality(
                    "multi-modality model needs a structural volume",
                ));
            }
            (Modality::Single, Some(_)) => {
                return Err(ModelError::UnexpectedModality(
                    "single-modality model does not take a structural volume",
                ));
            }
            (Modality::Single, None) => {}
        }
    }

    let mut rec = Recorder {
        tape: Tape::new(),
        hasher: kink_hash.then(DefaultHasher::new),
        bn_taps: Vec::new(),
    };

    // Parameters first, in canonical order, shared by every sample chain.
    let params: Vec<(String, NodeId)> = model
        .named_params()
        .into_iter()
        .map(|(name, t)| {
            let id = rec.tape.param(t.clone());
            (name, id)
        })
        .collect();

    let steps = spec.fmri_input.dims()[0];
    let n = samples.len();

    // Time-series branch, block by block across the whole batch.
    // cur[s][t] holds the node of sample s's timestep-t volume.
    let mut cur: Vec<Vec<NodeId>> = Vec::with_capacity(n);
    for s in samples {
        let inp = rec.tape.input(s.fmri.clone());
        let slices = (0..steps)
            .map(|t| rec.tape.slice_time(inp, t))
            .collect::<Result<Vec<_>, _>>()?;
        rec.tape.release_value(inp)?;
        cur.push(slices);
    }
    let n_blocks = model.fmri.blocks.len();
    let mut flat: Vec<NodeId> = Vec::new();
    for (bi, block) in model.fmri.blocks.iter().enumerate() {
        let prefix = format!("block{}", bi + 1);
        let kernel = find(&params, &format!("{prefix}.conv.kernel"));
        let bias = find(&params, &format!("{prefix}.conv.bias"));
        let gamma = find(&params, &format!("{prefix}.bn.gamma"));
        let beta = find(&params, &format!("{prefix}.bn.beta"));

        let mut time_stacked = Vec::with_capacity(n);
        for sample_nodes in &cur {
            let mut outs = Vec::with_capacity(steps);
            for &x in sample_nodes {
                outs.push(rec.conv_relu_pool(x, kernel, bias, block.pooled, bi == 0)?);
            }
            let stacked = rec.tape.stack(&outs)?;
            if block.pooled {
                // Pool backward needs only the recorded argmax; the pooled
                // values live on inside the stack.
                for &o in &outs {
                    rec.tape.release_value(o)?;
                }
            }
            time_stacked.push(stacked);
        }
        let normalized = rec.batchnorm_across(
            &time_stacked,
            gamma,
            beta,
            BlockRef::Fmri(bi),
            mode,
            Some((
                Arc::new(block.running_mean.data().to_vec()),
                Arc::new(block.running_var.data().to_vec()),
            )),
        )?;
        for &ts in &time_stacked {
            rec.tape.release_value(ts)?;
        }

        cur = Vec::with_capacity(n);
        for norm in normalized {
            if bi + 1 == n_blocks {
                let width = rec.tape.shape(norm)?.count() / steps;
                flat.push(rec.tape.reshape(norm, Shape::of(&[steps, width]))?);
                // Keep the flattened value (recurrent matvecs read slices of
                // it); the pre-reshape node shares the same buffer.
                rec.tape.release_value(norm)?;
            } else {
                let slices = (0..steps)
                    .map(|t| rec.tape.slice_time(norm, t))
                    .collect::<Result<Vec<_>, _>>()?;
                rec.tape.release_value(norm)?;
                cur.push(slices);
            }
        }
    }

    // Recurrent fold, dropout, and the branch embedding per sample.
    let mut fmri_embeds = Vec::with_capacity(n);
    for (s, &seq) in flat.iter().enumerate() {
        let xs = (0..steps)
            .map(|t| rec.tape.slice_time(seq, t))
            .collect::<Result<Vec<_>, _>>()?;
        rec.tape.release_value(seq)?;
        let mut hidden = record_rnn(&mut rec.tape, &model.fmri.rnn, &params, &xs)?;
        if let RecordMode::Train {
            dropout: Some(plan),
        } = mode
        {
            let mask = dropout_mask::<T>(
                rec.tape.shape(hidden)?,
                plan.rate,
                plan.seed,
                plan.call.wrapping_add(s as u64),
            )?;
            hidden = rec.tape.dropout(hidden, mask)?;
        }
        let w = find(&params, "dense.weight");
        let b = find(&params, "dense.bias");
        let z = rec.tape.matvec(w, hidden)?;
        let z = rec.tape.add(z, b)?;
        debug_assert_eq!(model.fmri.dense.activation, Activation::Relu);
        let e = rec.tape.relu(z)?;
        rec.hash_relu(e)?;
        fmri_embeds.push(e);
    }

    // Structural branch.
    let mri_embeds: Option<Vec<NodeId>> = match spec.modality {
        Modality::Single => None,
        Modality::Multi => {
            let branch = model.mri.as_ref().expect("validated");
            let mut cur: Vec<NodeId> = samples
                .iter()
                .map(|s| rec.tape.input(s.mri.expect("validated").clone()))
                .collect();
            for (bi, block) in branch.blocks.iter().enumerate() {
                let prefix = format!("mri.block{}", bi + 1);
                let kernel = find(&params, &format!("{prefix}.conv.kernel"));
                let bias = find(&params, &format!("{prefix}.conv.bias"));
                let gamma = find(&params, &format!("{prefix}.bn.gamma"));
                let beta = find(&params, &format!("{prefix}.bn.beta"));
                let mut outs = Vec::with_capacity(n);
                for &x in &cur {
                    outs.push(rec.conv_relu_pool(x, kernel, bias, block.pooled, bi == 0)?);
                }
                let normalized = rec.batchnorm_across(
                    &outs,
                    gamma,
                    beta,
                    BlockRef::Mri(bi),
                    mode,
                    Some((
                        Arc::new(block.running_mean.data().to_vec()),
                        Arc::new(block.running_var.data().to_vec()),
                    )),
                )?;
                if block.pooled {
                    for &o in &outs {
                        rec.tape.release_value(o)?;
                    }
                }
                cur = normalized;
            }
            let w = find(&params, "mri.dense.weight");
            let b = find(&params, "mri.dense.bias");
            let mut embeds = Vec::with_capacity(n);
            for &x in &cur {
                let width = rec.tape.shape(x)?.count();
                let flat = rec.tape.reshape(x, Shape::of(&[width]))?;
                let z = rec.tape.matvec(w, flat)?;
                let z = rec.tape.add(z, b)?;
                debug_assert_eq!(branch.dense.activation, Activation::Sigmoid);
                embeds.push(rec.tape.sigmoid(z)?);
            }
            Some(embeds)
        }
    };

    // Fusion head and per-sample losses.
    let w_out = find(&params, "output.weight");
    let b_out = find(&params, "output.bias");
    let mut sample_losses = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    for s in 0..n {
        let head_in = match &mri_embeds {
            Some(m) => rec.tape.concat(&[fmri_embeds[s], m[s]])?,
            None => fmri_embeds[s],
        };
        let z = rec.tape.matvec(w_out, head_in)?;
        let z = rec.tape.add(z, b_out)?;
        let p = rec.tape.sigmoid(z)?;
        let pv = rec.tape.value(p)?.item()?;
        probs.push(pv);
        rec.hash_clamp_region(pv.as_f64());
        sample_losses.push(rec.tape.bce(p, samples[s].label)?);
    }
    let loss = rec.tape.mean_of(&sample_losses)?;

    let kink_signature = rec.hasher.take().map_or(0, |h| h.finish());
    Ok(BatchRecording {
        tape: rec.tape,
        loss,
        sample_losses,
        probs,
        params,
        bn_taps: rec.bn_taps,
        kink_signature,
    })
}

/// Unroll the recurrent cell over `xs` on the tape, starting from a zero
/// state. Mirrors the pure step functions operation for operation, so frozen
/// recordings agree with the pure forward bitwise.
fn record_rnn<T: Scalar>(
    tape: &mut Tape<T>,
    rnn: &RnnParams<T>,
    params: &[(String, NodeId)],
    xs: &[NodeId],
) -> Result<NodeId, ModelError> {
    let hidden = rnn.hidden();
    let zero = Tensor::<T>::zeros(Shape::of(&[hidden]));
    match rnn {
        RnnParams::Gru(_) => {
            let w_c = find(params, "gru.W_c");
            let w_u = find(params, "gru.W_u");
            let w_r = find(params, "gru.W_r");
            let b_c = find(params, "gru.b_c");
            let b_u = find(params, "gru.b_u");
            let b_r = find(params, "gru.b_r");
            let mut cell = tape.input(zero);
            for &x in xs {
                let v = tape.concat(&[cell, x])?;
                let r = gate(tape, w_r, v, b_r)?;
                let u = gate(tape, w_u, v, b_u)?;
                let gated = tape.mul(r, cell)?;
                let v2 = tape.concat(&[gated, x])?;
                let zc = tape.matvec(w_c, v2)?;
                let zc = tape.add(zc, b_c)?;
                let cand = tape.tanh(zc)?;
                let keep = tape.mul(u, cand)?;
                let fade = tape.one_minus(u)?;
                let fade = tape.mul(fade, cell)?;
                cell = tape.add(keep, fade)?;
            }
            Ok(cell)
        }
        RnnParams::Lstm(_) => {
            let w_c = find(params, "lstm.W_c");
            let w_u = find(params, "lstm.W_u");
            let w_f = find(params, "lstm.W_f");
            let w_o = find(params, "lstm.W_o");
            let b_c = find(params, "lstm.b_c");
            let b_u = find(params, "lstm.b_u");
            let b_f = find(params, "lstm.b_f");
            let b_o = find(params, "lstm.b_o");
            let mut act = tape.input(zero.clone());
            let mut cell = tape.input(zero);
            for &x in xs {
                let v = tape.concat(&[act, x])?;
                let zc = tape.matvec(w_c, v)?;
                let zc = tape.add(zc, b_c)?;
                let cand = tape.tanh(zc)?;
                let u = gate(tape, w_u, v, b_u)?;
                let f = gate(tape, w_f, v, b_f)?;
                let o = gate(tape, w_o, v, b_o)?;
                let keep = tape.mul(u, cand)?;
                let carry = tape.mul(f, cell)?;
                cell = tape.add(keep, carry)?;
                let squashed = tape.tanh(cell)?;
                act = tape.mul(o, squashed)?;
            }
            Ok(act)
        }
    }
}

fn gate<T: Scalar>(
    tape: &mut Tape<T>,
    w: NodeId,
    v: NodeId,
    b: NodeId,
) -> Result<NodeId, ModelError> {
    let z = tape.matvec(w, v)?;
    let z = tape.add(z, b)?;
    Ok(tape.sigmoid(z)?)
}

// ───────────────────────── gradient checking ─────────────────────────

/// Finite-difference verdict for one named parameter tensor.
#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub name: String,
    pub report: CheckReport,
}

/// Mean batch loss and kink signature of `model` with dropout off and
/// batch-statistics batch norm — the exact function the training step
/// differentiates.
fn batch_loss(model: &Model<f64>, samples: &[SampleRef<'_, f64>]) -> (f64, u64) {
    let rec = record_batch(model, samples, &RecordMode::Train { dropout: None }, true)
        .expect("shapes validated before the sweep");
    let loss = rec
        .tape
        .value(rec.loss)
        .expect("loss node is live")
        .item()
        .expect("loss is scalar");
    (loss, rec.kink_signature)
}

/// Check every analytic parameter gradient of the model built from `spec`
/// against central finite differences, one named tensor at a time.
///
/// Runs in f64 with dropout off. Coordinates whose +/- eps evaluations cross
/// a branch decision (relu sign, pool argmax, loss clamp) are skipped and
/// counted rather than compared.
pub fn gradcheck_layers(
    spec: &ModelSpec,
    samples: &[SampleRef<'_, f64>],
    eps: f64,
) -> Result<Vec<LayerCheck>, ModelError> {
    gradcheck_layers_with_fault(spec, samples, eps, None)
}

/// [`gradcheck_layers`] with optional fault injection: the analytic
/// gradient of every parameter whose name contains `fault` is scaled by
/// 1.5 before the comparison, simulating a wrong backward rule. The check
/// must then fail on exactly those layers — this verifies the harness can
/// actually catch a bad gradient.
pub fn gradcheck_layers_with_fault(
    spec: &ModelSpec,
    samples: &[SampleRef<'_, f64>],
    eps: f64,
    fault: Option<&str>,
) -> Result<Vec<LayerCheck>, ModelError> {
    let model = build_model::<f64>(spec)?;

    // Analytic gradients for the whole parameter set, in one backward sweep.
    let mut rec = record_batch(&model, samples, &RecordMode::Train { dropout: None }, false)?;
    rec.tape.backward(rec.loss)?;
    let mut grads = Vec::with_capacity(rec.params.len());
    for (name, id) in &rec.params {
        let mut g = rec.tape.param_grad(*id)?;
        if let Some(pat) = fault {
            if name.contains(pat) {
                g = g.scale(1.5);
            }
        }
        grads.push((name.clone(), g));
    }
    drop(rec);

    let base: Vec<(String, Tensor<f64>)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let mut out = Vec::with_capacity(base.len());
    for (i, (name, tensor)) in base.iter().enumerate() {
        let mut f = |ps: &[Tensor<f64>]| -> (f64, u64) {
            let mut m = model.clone();
            *m.named_params_mut()[i].1 = ps[0].clone();
            batch_loss(&m, samples)
        };
        let report = finite_diff_check_guarded(
            &mut f,
            std::slice::from_ref(tensor),
            std::slice::from_ref(&grads[i].1),
            eps,
        )?;
        out.push(LayerCheck {
            name: name.clone(),
            report,
        });
    }
    Ok(out)
}
