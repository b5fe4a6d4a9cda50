//! Model assembly: time-distributed volumetric convolution branches, gated
//! recurrent temporal pooling, and optional two-branch fusion behind a single
//! sigmoid output.
//!
//! A [`ModelSpec`] fully determines a model: architecture hyperparameters plus
//! the seed for parameter initialization. Construction chain-checks every
//! layer shape up front, so a model that builds can always run. The symbolic
//! [`shape_trace`] and the runtime forward pass are derived from the same
//! plan, keeping the two in lockstep by construction.

mod checkpoint;
mod record;

pub use checkpoint::{load_model, save_model, CheckpointError, MANIFEST_FILE, WEIGHTS_FILE};
pub use record::{
    gradcheck_layers, gradcheck_layers_with_fault, record_batch, BatchRecording, BnTap,
    DropoutPlan, LayerCheck, RecordMode, SampleRef,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::AutodiffError;
use crate::layers::{
    self, batch_stats, batchnorm_apply, conv3d, dense, maxpool3d, Activation, LayerError, BN_EPS,
    KERNEL_EXTENT,
};
use crate::recurrent::{run_sequence, CellKind, GruParams, LstmParams, RnnParams};
use crate::tensor::{Scalar, Shape, Tensor, TensorError};
use crate::util::{seeded_rng, uniform_sym};

// ───────────────────────────── errors ─────────────────────────────

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("missing modality: {0}")]
    MissingModality(&'static str),
    #[error("unexpected modality: {0}")]
    UnexpectedModality(&'static str),
    #[error("empty micro-batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

// ───────────────────────────── spec ─────────────────────────────

/// Which input branches the classifier consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// Volumetric time series only.
    Single,
    /// Volumetric time series plus a single structural volume.
    Multi,
}

/// Standard time-series input: 30 timesteps of 28x28x28 single-channel
/// volumes.
pub const STANDARD_FMRI_INPUT: [usize; 5] = [30, 28, 28, 28, 1];
/// Structural-volume resolutions the standard constructors accept.
pub const STANDARD_MRI_RES: [usize; 2] = [64, 32];

fn default_fmri_input() -> Shape {
    Shape::of(&STANDARD_FMRI_INPUT)
}

fn default_fmri_filters() -> Vec<usize> {
    vec![64, 128, 256]
}

fn default_mri_filters() -> Vec<usize> {
    vec![64, 128, 256, 256]
}

fn default_rnn_hidden() -> usize {
    128
}

fn default_embed_width() -> usize {
    512
}

fn default_dropout() -> f64 {
    0.3
}

/// Complete architectural description of a classifier.
///
/// Equal specs (same seed included) always build bitwise-identical models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub modality: Modality,
    pub rnn_kind: CellKind,
    /// Time-series input shape `[T, D, H, W, 1]`.
    #[serde(default = "default_fmri_input")]
    pub fmri_input: Shape,
    /// Structural volume shape `[D, H, W, 1]`; present iff `modality` is
    /// `multi`.
    #[serde(default)]
    pub mri_input: Option<Shape>,
    /// Channel widths of the three time-distributed convolution blocks.
    #[serde(default = "default_fmri_filters")]
    pub fmri_filters: Vec<usize>,
    /// Channel widths of the four structural-branch convolution blocks.
    #[serde(default = "default_mri_filters")]
    pub mri_filters: Vec<usize>,
    /// Recurrent state width.
    #[serde(default = "default_rnn_hidden")]
    pub rnn_hidden: usize,
    /// Width of each branch embedding (the pre-fusion dense layers).
    #[serde(default = "default_embed_width")]
    pub embed_width: usize,
    /// Dropout rate applied to the recurrent output in training mode.
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Seed for all parameter initialization.
    pub seed: u64,
}

impl ModelSpec {
    /// Single-modality classifier at the standard input size.
    pub fn single(rnn_kind: CellKind, seed: u64) -> Self {
        ModelSpec {
            modality: Modality::Single,
            rnn_kind,
            fmri_input: default_fmri_input(),
            mri_input: None,
            fmri_filters: default_fmri_filters(),
            mri_filters: default_mri_filters(),
            rnn_hidden: default_rnn_hidden(),
            embed_width: default_embed_width(),
            dropout: default_dropout(),
            seed,
        }
    }

    /// Multi-modality classifier; `mri_res` must be 64 or 32.
    pub fn multi(rnn_kind: CellKind, mri_res: usize, seed: u64) -> Result<Self, ModelError> {
        if !STANDARD_MRI_RES.contains(&mri_res) {
            return Err(ModelError::InvalidSpec(format!(
                "structural resolution must be one of {STANDARD_MRI_RES:?}, got {mri_res}"
            )));
        }
        Ok(ModelSpec {
            modality: Modality::Multi,
            mri_input: Some(Shape::of(&[mri_res, mri_res, mri_res, 1])),
            ..ModelSpec::single(rnn_kind, seed)
        })
    }

    /// Toy-scaled variant for gradient checking: 6x6x6 spatial, 2 timesteps,
    /// filters 4/8/16, hidden width 8. Small enough that finite differences
    /// over every parameter finish in seconds.
    pub fn toy(modality: Modality, rnn_kind: CellKind, seed: u64) -> Self {
        ModelSpec {
            modality,
            rnn_kind,
            fmri_input: Shape::of(&[2, 6, 6, 6, 1]),
            mri_input: match modality {
                Modality::Single => None,
                Modality::Multi => Some(Shape::of(&[6, 6, 6, 1])),
            },
            fmri_filters: vec![4, 8, 16],
            mri_filters: vec![4, 8, 16, 16],
            rnn_hidden: 8,
            embed_width: 8,
            dropout: 0.3,
            seed,
        }
    }

    /// Structural soundness check; run by [`build_model`] before any
    /// allocation.
    pub fn validate(&self) -> Result<(), ModelError> {
        let f = self.fmri_input.dims();
        if f.len() != 5 || f[4] != 1 {
            return Err(ModelError::InvalidSpec(format!(
                "time-series input must be [T, D, H, W, 1], got {}",
                self.fmri_input
            )));
        }
        match (self.modality, &self.mri_input) {
            (Modality::Single, Some(_)) => {
                return Err(ModelError::InvalidSpec(
                    "single-modality spec must not carry a structural input shape".into(),
                ));
            }
            (Modality::Multi, None) => {
                return Err(ModelError::InvalidSpec(
                    "multi-modality spec needs mri_input".into(),
                ));
            }
            (Modality::Multi, Some(m)) => {
                let d = m.dims();
                if d.len() != 4 || d[3] != 1 {
                    return Err(ModelError::InvalidSpec(format!(
                        "structural input must be [D, H, W, 1], got {m}"
                    )));
                }
            }
            (Modality::Single, None) => {}
        }
        if self.fmri_filters.len() != 3 {
            return Err(ModelError::InvalidSpec(format!(
                "need exactly 3 time-series filter widths, got {:?}",
                self.fmri_filters
            )));
        }
        if self.modality == Modality::Multi && self.mri_filters.len() != 4 {
            return Err(ModelError::InvalidSpec(format!(
                "need exactly 4 structural filter widths, got {:?}",
                self.mri_filters
            )));
        }
        if self.fmri_filters.iter().any(|&c| c == 0) || self.mri_filters.iter().any(|&c| c == 0) {
            return Err(ModelError::InvalidSpec("filter widths must be >= 1".into()));
        }
        if self.rnn_hidden == 0 || self.embed_width == 0 {
            return Err(ModelError::InvalidSpec(
                "rnn_hidden and embed_width must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidSpec(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

// ───────────────────────────── layer plan ─────────────────────────────

/// Shape bookkeeping for one convolution block, fixed at construction.
#[derive(Debug, Clone, PartialEq, Eq)]
struct BlockPlan {
    c_in: usize,
    c_out: usize,
    /// Spatial extents after the stride-2 pool (equal to the input extents
    /// when `pooled` is false).
    out_spatial: [usize; 3],
    /// Whether this block pools. Pooling is skipped when any spatial extent
    /// would collapse to zero, which only happens in toy-scaled specs.
    pooled: bool,
}

/// Chain the block shapes for one branch: convolution preserves spatial
/// extents ("same" padding), pooling halves them with floor division.
fn plan_blocks(spatial: [usize; 3], filters: &[usize]) -> Vec<BlockPlan> {
    let mut s = spatial;
    let mut c_in = 1;
    let mut plans = Vec::with_capacity(filters.len());
    for &c_out in filters {
        let pooled = s.iter().all(|&e| e / 2 >= 1);
        if pooled {
            s = [s[0] / 2, s[1] / 2, s[2] / 2];
        }
        plans.push(BlockPlan {
            c_in,
            c_out,
            out_spatial: s,
            pooled,
        });
        c_in = c_out;
    }
    plans
}

fn flatten_width(plans: &[BlockPlan]) -> usize {
    let last = plans.last().expect("at least one block");
    last.out_spatial.iter().product::<usize>() * last.c_out
}

fn fmri_spatial(spec: &ModelSpec) -> [usize; 3] {
    let d = spec.fmri_input.dims();
    [d[1], d[2], d[3]]
}

fn mri_spatial(shape: &Shape) -> [usize; 3] {
    let d = shape.dims();
    [d[0], d[1], d[2]]
}

// ───────────────────────────── parameters ─────────────────────────────

/// Parameters of one conv → relu → (pool) → batchnorm block.
#[derive(Debug, Clone)]
pub struct ConvBlock<T: Scalar> {
    /// `[2, 2, 2, c_in, c_out]`
    pub kernel: Tensor<T>,
    /// `[c_out]`
    pub bias: Tensor<T>,
    /// Batch-norm scale `[c_out]`.
    pub gamma: Tensor<T>,
    /// Batch-norm shift `[c_out]`.
    pub beta: Tensor<T>,
    /// Running mean, kept in f64 so checkpoints are precision-independent.
    pub running_mean: Tensor<f64>,
    /// Running variance, initialized to one.
    pub running_var: Tensor<f64>,
    /// Whether the block pools (see [`BlockPlan::pooled`]).
    pub pooled: bool,
}

/// Dense layer `act(w @ x + b)` with `w: [out, in]`.
#[derive(Debug, Clone)]
pub struct DenseLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
}

/// Time-series branch: three time-distributed conv blocks, a recurrent cell
/// over the flattened per-timestep features, dropout, and a dense embedding.
#[derive(Debug, Clone)]
pub struct FmriBranch<T: Scalar> {
    pub blocks: Vec<ConvBlock<T>>,
    pub rnn: RnnParams<T>,
    pub dense: DenseLayer<T>,
}

/// Structural branch: four conv blocks and a dense embedding.
#[derive(Debug, Clone)]
pub struct MriBranch<T: Scalar> {
    pub blocks: Vec<ConvBlock<T>>,
    pub dense: DenseLayer<T>,
}

/// A fully built classifier. Parameter layout is fixed by the spec; the
/// canonical parameter order (used by the optimizer and checkpoints alike) is
/// the order produced by [`Model::named_params`].
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    pub fmri: FmriBranch<T>,
    pub mri: Option<MriBranch<T>>,
    pub head: DenseLayer<T>,
    /// Total trainable scalar count, fixed at construction.
    pub total_params: usize,
}

/// Identifies a conv block inside a model, for running-stat updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockRef {
    Fmri(usize),
    Mri(usize),
}

fn draw_tensor<T: Scalar>(shape: Shape, bound: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor<T> {
    let data: Vec<T> = (0..shape.count())
        .map(|_| T::of_f64(uniform_sym(rng, bound)))
        .collect();
    Tensor::new(shape, data).expect("count matches shape")
}

fn init_block<T: Scalar>(plan: &BlockPlan, rng: &mut rand_chacha::ChaCha8Rng) -> ConvBlock<T> {
    let k = KERNEL_EXTENT;
    let fan_in = (k * k * k * plan.c_in) as f64;
    ConvBlock {
        kernel: draw_tensor(
            Shape::of(&[k, k, k, plan.c_in, plan.c_out]),
            1.0 / fan_in.sqrt(),
            rng,
        ),
        bias: Tensor::zeros(Shape::of(&[plan.c_out])),
        gamma: Tensor::ones(Shape::of(&[plan.c_out])),
        beta: Tensor::zeros(Shape::of(&[plan.c_out])),
        running_mean: Tensor::zeros(Shape::of(&[plan.c_out])),
        running_var: Tensor::ones(Shape::of(&[plan.c_out])),
        pooled: plan.pooled,
    }
}

fn init_dense<T: Scalar>(
    out: usize,
    input: usize,
    activation: Activation,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> DenseLayer<T> {
    DenseLayer {
        weight: draw_tensor(Shape::of(&[out, input]), 1.0 / (input as f64).sqrt(), rng),
        bias: Tensor::zeros(Shape::of(&[out])),
        activation,
    }
}

/// Build a model from its spec: chain-check all shapes, then draw every
/// parameter from a single RNG stream seeded by `spec.seed`.
///
/// Draw order is fixed: time-series blocks 1..3 (kernel only; biases, batch
/// norm shifts start at zero), recurrent weights, time-series dense,
/// structural blocks 1..4 and dense (multi only), output dense. Weights are
/// U(-1/sqrt(fan_in), +1/sqrt(fan_in)), drawn in f64 and cast, so f32 and f64
/// builds see the same stream.
pub fn build_model<T: Scalar>(spec: &ModelSpec) -> Result<Model<T>, ModelError> {
    spec.validate()?;
    let fmri_plans = plan_blocks(fmri_spatial(spec), &spec.fmri_filters);
    let mri_plans = spec
        .mri_input
        .as_ref()
        .map(|m| plan_blocks(mri_spatial(m), &spec.mri_filters));

    let mut rng = seeded_rng(spec.seed);
    let blocks: Vec<ConvBlock<T>> = fmri_plans.iter().map(|p| init_block(p, &mut rng)).collect();
    let feat = flatten_width(&fmri_plans);
    let rnn = match spec.rnn_kind {
        CellKind::Gru => RnnParams::Gru(GruParams::init(spec.rnn_hidden, feat, &mut rng)),
        CellKind::Lstm => RnnParams::Lstm(LstmParams::init(spec.rnn_hidden, feat, &mut rng)),
    };
    let fmri_dense = init_dense(spec.embed_width, spec.rnn_hidden, Activation::Relu, &mut rng);
    let fmri = FmriBranch {
        blocks,
        rnn,
        dense: fmri_dense,
    };

    let mri = match &mri_plans {
        Some(plans) => {
            let blocks: Vec<ConvBlock<T>> = plans.iter().map(|p| init_block(p, &mut rng)).collect();
            let dense = init_dense(
                spec.embed_width,
                flatten_width(plans),
                Activation::Sigmoid,
                &mut rng,
            );
            Some(MriBranch { blocks, dense })
        }
        None => None,
    };

    let head_in = match spec.modality {
        Modality::Single => spec.embed_width,
        Modality::Multi => 2 * spec.embed_width,
    };
    let head = init_dense(1, head_in, Activation::Sigmoid, &mut rng);

    let mut model = Model {
        spec: spec.clone(),
        fmri,
        mri,
        head,
        total_params: 0,
    };
    model.total_params = model.named_params().iter().map(|(_, t)| t.count()).sum();
    Ok(model)
}

impl<T: Scalar> Model<T> {
    /// Trainable parameters in canonical order, with their checkpoint names.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        for (i, b) in self.fmri.blocks.iter().enumerate() {
            push_block_params(&mut out, &format!("block{}", i + 1), b);
        }
        push_rnn_params(&mut out, &self.fmri.rnn);
        out.push(("dense.weight".into(), &self.fmri.dense.weight));
        out.push(("dense.bias".into(), &self.fmri.dense.bias));
        if let Some(mri) = &self.mri {
            for (i, b) in mri.blocks.iter().enumerate() {
                push_block_params(&mut out, &format!("mri.block{}", i + 1), b);
            }
            out.push(("mri.dense.weight".into(), &mri.dense.weight));
            out.push(("mri.dense.bias".into(), &mri.dense.bias));
        }
        out.push(("output.weight".into(), &self.head.weight));
        out.push(("output.bias".into(), &self.head.bias));
        out
    }

    /// Mutable view of the trainable parameters, same order and names as
    /// [`Model::named_params`].
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        for (i, b) in self.fmri.blocks.iter_mut().enumerate() {
            let p = format!("block{}", i + 1);
            out.push((format!("{p}.conv.kernel"), &mut b.kernel));
            out.push((format!("{p}.conv.bias"), &mut b.bias));
            out.push((format!("{p}.bn.gamma"), &mut b.gamma));
            out.push((format!("{p}.bn.beta"), &mut b.beta));
        }
        match &mut self.fmri.rnn {
            RnnParams::Gru(p) => {
                out.push(("gru.W_c".into(), &mut p.w_c));
                out.push(("gru.W_u".into(), &mut p.w_u));
                out.push(("gru.W_r".into(), &mut p.w_r));
                out.push(("gru.b_c".into(), &mut p.b_c));
                out.push(("gru.b_u".into(), &mut p.b_u));
                out.push(("gru.b_r".into(), &mut p.b_r));
            }
            RnnParams::Lstm(p) => {
                out.push(("lstm.W_c".into(), &mut p.w_c));
                out.push(("lstm.W_u".into(), &mut p.w_u));
                out.push(("lstm.W_f".into(), &mut p.w_f));
                out.push(("lstm.W_o".into(), &mut p.w_o));
                out.push(("lstm.b_c".into(), &mut p.b_c));
                out.push(("lstm.b_u".into(), &mut p.b_u));
                out.push(("lstm.b_f".into(), &mut p.b_f));
                out.push(("lstm.b_o".into(), &mut p.b_o));
            }
        }
        out.push(("dense.weight".into(), &mut self.fmri.dense.weight));
        out.push(("dense.bias".into(), &mut self.fmri.dense.bias));
        if let Some(mri) = &mut self.mri {
            for (i, b) in mri.blocks.iter_mut().enumerate() {
                let p = format!("mri.block{}", i + 1);
                out.push((format!("{p}.conv.kernel"), &mut b.kernel));
                out.push((format!("{p}.conv.bias"), &mut b.bias));
                out.push((format!("{p}.bn.gamma"), &mut b.gamma));
                out.push((format!("{p}.bn.beta"), &mut b.beta));
            }
            out.push(("mri.dense.weight".into(), &mut mri.dense.weight));
            out.push(("mri.dense.bias".into(), &mut mri.dense.bias));
        }
        out.push(("output.weight".into(), &mut self.head.weight));
        out.push(("output.bias".into(), &mut self.head.bias));
        out
    }

    /// Non-trainable state (batch-norm running statistics) with checkpoint
    /// names, in canonical order.
    pub fn named_state(&self) -> Vec<(String, &Tensor<f64>)> {
        let mut out: Vec<(String, &Tensor<f64>)> = Vec::new();
        for (i, b) in self.fmri.blocks.iter().enumerate() {
            out.push((format!("block{}.bn.running_mean", i + 1), &b.running_mean));
            out.push((format!("block{}.bn.running_var", i + 1), &b.running_var));
        }
        if let Some(mri) = &self.mri {
            for (i, b) in mri.blocks.iter().enumerate() {
                out.push((format!("mri.block{}.bn.running_mean", i + 1), &b.running_mean));
                out.push((format!("mri.block{}.bn.running_var", i + 1), &b.running_var));
            }
        }
        out
    }

    /// Mutable view of the non-trainable state, same order and names as
    /// [`Model::named_state`].
    pub fn named_state_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        let mut out: Vec<(String, &mut Tensor<f64>)> = Vec::new();
        for (i, b) in self.fmri.blocks.iter_mut().enumerate() {
            out.push((format!("block{}.bn.running_mean", i + 1), &mut b.running_mean));
            out.push((format!("block{}.bn.running_var", i + 1), &mut b.running_var));
        }
        if let Some(mri) = &mut self.mri {
            for (i, b) in mri.blocks.iter_mut().enumerate() {
                out.push((
                    format!("mri.block{}.bn.running_mean", i + 1),
                    &mut b.running_mean,
                ));
                out.push((
                    format!("mri.block{}.bn.running_var", i + 1),
                    &mut b.running_var,
                ));
            }
        }
        out
    }

    pub fn conv_block(&self, r: BlockRef) -> &ConvBlock<T> {
        match r {
            BlockRef::Fmri(i) => &self.fmri.blocks[i],
            BlockRef::Mri(i) => &self.mri.as_ref().expect("structural branch present").blocks[i],
        }
    }

    pub fn conv_block_mut(&mut self, r: BlockRef) -> &mut ConvBlock<T> {
        match r {
            BlockRef::Fmri(i) => &mut self.fmri.blocks[i],
            BlockRef::Mri(i) => &mut self.mri.as_mut().expect("structural branch present").blocks[i],
        }
    }

    /// Total trainable scalar count.
    pub fn count_params(&self) -> usize {
        self.total_params
    }

    /// Per-layer parameter audit: trainable and non-trainable scalar counts.
    pub fn param_counts(&self) -> Vec<ParamCount> {
        let mut rows: Vec<ParamCount> = Vec::new();
        for (i, b) in self.fmri.blocks.iter().enumerate() {
            rows.extend(block_counts(&format!("block{}", i + 1), b));
        }
        let rnn_name = self.spec.rnn_kind.name().to_string();
        let rnn_count = match &self.fmri.rnn {
            RnnParams::Gru(p) => {
                3 * (p.w_c.count() + p.b_c.count())
            }
            RnnParams::Lstm(p) => 4 * (p.w_c.count() + p.b_c.count()),
        };
        rows.push(ParamCount {
            name: rnn_name,
            trainable: rnn_count,
            non_trainable: 0,
        });
        rows.push(dense_count("dense", &self.fmri.dense));
        if let Some(mri) = &self.mri {
            for (i, b) in mri.blocks.iter().enumerate() {
                rows.extend(block_counts(&format!("mri.block{}", i + 1), b));
            }
            rows.push(dense_count("mri.dense", &mri.dense));
        }
        rows.push(dense_count("output", &self.head));
        rows
    }

    /// Symbolic layer/shape listing; see the free function [`shape_trace`].
    pub fn shape_trace(&self) -> Vec<TraceEntry> {
        shape_trace(&self.spec).expect("spec validated at construction")
    }

    /// Classify one sample. Returns the output probability (strictly inside
    /// (0, 1) because it is a sigmoid of a finite logit).
    pub fn forward(
        &self,
        fmri: &Tensor<T>,
        mri: Option<&Tensor<T>>,
        mode: ForwardMode,
    ) -> Result<T, ModelError> {
        Ok(self.forward_detail(fmri, mri, mode)?.prob)
    }

    /// Classify one sample, exposing the branch embeddings and the logit.
    pub fn forward_detail(
        &self,
        fmri: &Tensor<T>,
        mri: Option<&Tensor<T>>,
        mode: ForwardMode,
    ) -> Result<ForwardDetail<T>, ModelError> {
        if fmri.shape() != &self.spec.fmri_input {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "forward",
                left: fmri.shape().to_string(),
                right: self.spec.fmri_input.to_string(),
            }));
        }
        let mri = match (self.spec.modality, mri) {
            (Modality::Multi, Some(m)) => {
                let want = self.spec.mri_input.as_ref().expect("validated");
                if m.shape() != want {
                    return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                        op: "forward",
                        left: m.shape().to_string(),
                        right: want.to_string(),
                    }));
                }
                Some(m)
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
            (Modality::Single, None) => None,
        };

        let train = matches!(mode, ForwardMode::Train { .. });

        // Time-series branch: per-timestep conv blocks with batch-norm
        // statistics shared across time, then the recurrent fold.
        let steps = self.spec.fmri_input.dims()[0];
        let mut vols: Vec<Tensor<T>> = (0..steps)
            .map(|t| fmri.slice_time(t))
            .collect::<Result<_, _>>()?;
        for block in &self.fmri.blocks {
            for v in &mut vols {
                *v = conv_relu_pool(v, block)?;
            }
            let refs: Vec<&Tensor<T>> = vols.iter().collect();
            let (mean, var) = block_stats(&refs, block, train)?;
            for v in &mut vols {
                *v = batchnorm_apply(v, &block.gamma, &block.beta, &mean, &var, BN_EPS)?;
            }
        }
        let feat = flatten_width(&plan_blocks(fmri_spatial(&self.spec), &self.spec.fmri_filters));
        let rows: Vec<Tensor<T>> = vols
            .iter()
            .map(|v| v.reshape(Shape::of(&[feat])))
            .collect::<Result<_, _>>()?;
        let row_refs: Vec<&Tensor<T>> = rows.iter().collect();
        let seq = Tensor::stack(&row_refs)?;
        let mut hidden = run_sequence(&self.fmri.rnn, &seq)?;
        if let ForwardMode::Train {
            dropout_seed,
            dropout_call,
        } = mode
        {
            hidden = layers::dropout(&hidden, self.spec.dropout, dropout_seed, dropout_call)?.0;
        }
        let fmri_embed = dense(
            &hidden,
            &self.fmri.dense.weight,
            &self.fmri.dense.bias,
            self.fmri.dense.activation,
        )?;

        // Structural branch.
        let mri_embed = match mri {
            Some(vol) => {
                let branch = self.mri.as_ref().expect("validated");
                let mut v = vol.clone();
                for block in &branch.blocks {
                    v = conv_relu_pool(&v, block)?;
                    let (mean, var) = block_stats(&[&v], block, train)?;
                    v = batchnorm_apply(&v, &block.gamma, &block.beta, &mean, &var, BN_EPS)?;
                }
                let flat = v.reshape(Shape::of(&[v.count()]))?;
                Some(dense(
                    &flat,
                    &branch.dense.weight,
                    &branch.dense.bias,
                    branch.dense.activation,
                )?)
            }
            None => None,
        };

        // Fusion head: a dense layer over the (concatenated) embedding.
        let head_in = match &mri_embed {
            Some(m) => Tensor::concat(&[&fmri_embed, m])?,
            None => fmri_embed.clone(),
        };
        let logit = self
            .head
            .weight
            .matvec(&head_in)?
            .add(&self.head.bias)?
            .item()?;
        let prob = crate::tensor::sigmoid_scalar(logit);
        Ok(ForwardDetail {
            fmri_embed,
            mri_embed,
            logit,
            prob,
        })
    }
}

/// conv → relu → (pool) for one block; batch norm is applied by the caller
/// once statistics for the whole batch/sequence are known.
fn conv_relu_pool<T: Scalar>(x: &Tensor<T>, block: &ConvBlock<T>) -> Result<Tensor<T>, LayerError> {
    let y = conv3d(x, &block.kernel, &block.bias)?.relu();
    if block.pooled {
        Ok(maxpool3d(&y)?.0)
    } else {
        Ok(y)
    }
}

/// Batch-norm statistics for a block: computed from the tensors themselves in
/// training mode, read from the running buffers in eval mode.
fn block_stats<T: Scalar>(
    xs: &[&Tensor<T>],
    block: &ConvBlock<T>,
    train: bool,
) -> Result<(Vec<f64>, Vec<f64>), LayerError> {
    if train {
        batch_stats(xs)
    } else {
        Ok((
            block.running_mean.data().to_vec(),
            block.running_var.data().to_vec(),
        ))
    }
}

fn push_block_params<'m, T: Scalar>(
    out: &mut Vec<(String, &'m Tensor<T>)>,
    prefix: &str,
    b: &'m ConvBlock<T>,
) {
    out.push((format!("{prefix}.conv.kernel"), &b.kernel));
    out.push((format!("{prefix}.conv.bias"), &b.bias));
    out.push((format!("{prefix}.bn.gamma"), &b.gamma));
    out.push((format!("{prefix}.bn.beta"), &b.beta));
}

fn push_rnn_params<'m, T: Scalar>(out: &mut Vec<(String, &'m Tensor<T>)>, rnn: &'m RnnParams<T>) {
    match rnn {
        RnnParams::Gru(p) => {
            out.push(("gru.W_c".into(), &p.w_c));
            out.push(("gru.W_u".into(), &p.w_u));
            out.push(("gru.W_r".into(), &p.w_r));
            out.push(("gru.b_c".into(), &p.b_c));
            out.push(("gru.b_u".into(), &p.b_u));
            out.push(("gru.b_r".into(), &p.b_r));
        }
        RnnParams::Lstm(p) => {
            out.push(("lstm.W_c".into(), &p.w_c));
            out.push(("lstm.W_u".into(), &p.w_u));
            out.push(("lstm.W_f".into(), &p.w_f));
            out.push(("lstm.W_o".into(), &p.w_o));
            out.push(("lstm.b_c".into(), &p.b_c));
            out.push(("lstm.b_u".into(), &p.b_u));
            out.push(("lstm.b_f".into(), &p.b_f));
            out.push(("lstm.b_o".into(), &p.b_o));
        }
    }
}

fn block_counts<T: Scalar>(prefix: &str, b: &ConvBlock<T>) -> [ParamCount; 2] {
    [
        ParamCount {
            name: format!("{prefix}.conv"),
            trainable: b.kernel.count() + b.bias.count(),
            non_trainable: 0,
        },
        ParamCount {
            name: format!("{prefix}.bn"),
            trainable: b.gamma.count() + b.beta.count(),
            non_trainable: b.running_mean.count() + b.running_var.count(),
        },
    ]
}

fn dense_count<T: Scalar>(name: &str, d: &DenseLayer<T>) -> ParamCount {
    ParamCount {
        name: name.into(),
        trainable: d.weight.count() + d.bias.count(),
        non_trainable: 0,
    }
}

/// Per-layer parameter audit row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub name: String,
    pub trainable: usize,
    pub non_trainable: usize,
}

/// Forward-pass mode: evaluation uses running batch-norm statistics and no
/// dropout; training uses batch statistics and a deterministic dropout mask
/// keyed by `(dropout_seed, dropout_call)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    Train { dropout_seed: u64, dropout_call: u64 },
}

/// Forward-pass result with the branch embeddings exposed.
#[derive(Debug, Clone)]
pub struct ForwardDetail<T: Scalar> {
    pub fmri_embed: Tensor<T>,
    pub mri_embed: Option<Tensor<T>>,
    pub logit: T,
    pub prob: T,
}

// ───────────────────────────── shape trace ─────────────────────────────

/// One line of the symbolic shape listing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TraceEntry {
    fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        TraceEntry {
            name: name.into(),
            shape,
        }
    }
}

/// Symbolic per-layer output shapes, computed without touching any data.
///
/// The trace is derived from the same [`BlockPlan`] chain the builder uses,
/// so construction-time shapes and the trace cannot drift apart.
pub fn shape_trace(spec: &ModelSpec) -> Result<Vec<TraceEntry>, ModelError> {
    spec.validate()?;
    let mut out = Vec::new();
    let t = spec.fmri_input.dims()[0];
    let mut spatial = fmri_spatial(spec);
    out.push(TraceEntry::new("input", spec.fmri_input.dims().to_vec()));
    let fmri_plans = plan_blocks(spatial, &spec.fmri_filters);
    for (i, p) in fmri_plans.iter().enumerate() {
        let conv = vec![t, spatial[0], spatial[1], spatial[2], p.c_out];
        out.push(TraceEntry::new(format!("block{}.conv", i + 1), conv));
        if p.pooled {
            let pooled = vec![
                t,
                p.out_spatial[0],
                p.out_spatial[1],
                p.out_spatial[2],
                p.c_out,
            ];
            out.push(TraceEntry::new(format!("block{}.pool", i + 1), pooled));
        }
        spatial = p.out_spatial;
        out.push(TraceEntry::new(
            format!("block{}.bn", i + 1),
            vec![t, spatial[0], spatial[1], spatial[2], p.c_out],
        ));
    }
    out.push(TraceEntry::new(
        "flatten",
        vec![t, flatten_width(&fmri_plans)],
    ));
    out.push(TraceEntry::new(
        spec.rnn_kind.name(),
        vec![spec.rnn_hidden],
    ));
    out.push(TraceEntry::new("dropout", vec![spec.rnn_hidden]));
    out.push(TraceEntry::new("dense", vec![spec.embed_width]));

    if let Some(mri_shape) = &spec.mri_input {
        let mut spatial = mri_spatial(mri_shape);
        out.push(TraceEntry::new("mri.input", mri_shape.dims().to_vec()));
        let mri_plans = plan_blocks(spatial, &spec.mri_filters);
        for (i, p) in mri_plans.iter().enumerate() {
            let conv = vec![spatial[0], spatial[1], spatial[2], p.c_out];
            out.push(TraceEntry::new(format!("mri.block{}.conv", i + 1), conv));
            if p.pooled {
                out.push(TraceEntry::new(
                    format!("mri.block{}.pool", i + 1),
                    vec![p.out_spatial[0], p.out_spatial[1], p.out_spatial[2], p.c_out],
                ));
            }
            spatial = p.out_spatial;
            out.push(TraceEntry::new(
                format!("mri.block{}.bn", i + 1),
                vec![spatial[0], spatial[1], spatial[2], p.c_out],
            ));
        }
        out.push(TraceEntry::new(
            "mri.flatten",
            vec![flatten_width(&mri_plans)],
        ));
        out.push(TraceEntry::new("mri.dense", vec![spec.embed_width]));
        out.push(TraceEntry::new("fusion", vec![2 * spec.embed_width]));
    }
    out.push(TraceEntry::new("output", vec![1]));
    Ok(out)
}
