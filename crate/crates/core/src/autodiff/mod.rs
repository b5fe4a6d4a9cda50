//! Dynamic reverse-mode automatic differentiation.
//!
//! A [`Tape`] records operations as they execute; every recorded op stores
//! its result plus whatever context its backward rule needs (pool argmax,
//! dropout mask, normalization statistics). [`Tape::backward`] walks the
//! nodes in reverse creation order, applying vector-Jacobian products and
//! accumulating gradients into each node. Creation order is a topological
//! order by construction, so a single reverse sweep suffices.
//!
//! Memory discipline for large graphs:
//! * [`Tape::release_value`] drops a stored activation the caller knows no
//!   backward rule will read (e.g. a convolution output once the following
//!   relu — whose backward uses its own output — has been recorded);
//! * [`Tape::backward_release`] additionally frees each non-leaf value and
//!   gradient as soon as the reverse sweep has consumed it.

pub mod check;


use std::sync::Arc;

use crate::layers;
use crate::tensor::{Scalar, Shape, Tensor, TensorError};

pub type NodeId = usize;

/// Clamp applied to predicted probabilities inside the binary cross-entropy
/// loss (and its gradient), keeping the logarithms finite.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("unknown input node {0}")]
    UnknownInput(NodeId),
    #[error("loss must be a single-element tensor, got shape {0}")]
    NonScalarLoss(String),
    #[error("value of node {0} has been released")]
    ReleasedValue(NodeId),
    #[error("non-deterministic function: {0}")]
    NonDeterministicFunction(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Layer(#[from] layers::LayerError),
}

/// Recorded operation. Layer ops carry the saved context their backward
/// rules need; everything else recomputes from stored input/output values.
enum Op<T: Scalar> {
    Leaf { trainable: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    Scale(NodeId, T),
    Neg(NodeId),
    OneMinus(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Matmul(NodeId, NodeId),
    Matvec(NodeId, NodeId),
    Reshape(NodeId),
    Concat(Vec<NodeId>),
    SliceTime(NodeId, usize),
    Stack(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    MeanOf(Vec<NodeId>),
    Conv3d {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        need_dx: bool,
    },
    MaxPool3d {
        x: NodeId,
        argmax: Arc<Vec<u32>>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Arc<Vec<f64>>,
        var: Arc<Vec<f64>>,
        eps: f64,
        /// true: statistics came from x itself and the backward pass
        /// differentiates through them; false: statistics are constants.
        self_stats: bool,
    },
    Dropout {
        x: NodeId,
        mask: Tensor<T>,
    },
    Bce {
        p: NodeId,
        target: f64,
    },
}

struct Node<T: Scalar> {
    op: Op<T>,
    shape: Shape,
    value: Option<Tensor<T>>,
    grad: Option<Tensor<T>>,
}

/// Gradient contribution flowing to one input of an op.
enum Contrib<T: Scalar> {
    /// Dense tensor matching the input's shape.
    Full(Tensor<T>),
    /// Gradient of one leading-axis slice of the input (from `slice_time`);
    /// accumulated in place to avoid materializing a mostly-zero tensor.
    Slice { t: usize, g: Tensor<T> },
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape: value.shape().clone(),
            value: Some(value),
            grad: None,
        });
        id
    }

    fn checked(&self, id: NodeId) -> Result<&Node<T>, AutodiffError> {
        self.nodes.get(id).ok_or(AutodiffError::UnknownInput(id))
    }

    /// Stored value of a node; errors if the id is unknown or released.
    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>, AutodiffError> {
        self.checked(id)?
            .value
            .as_ref()
            .ok_or(AutodiffError::ReleasedValue(id))
    }

    /// Gradient accumulated into a node by the last backward sweep.
    pub fn grad(&self, id: NodeId) -> Result<Option<&Tensor<T>>, AutodiffError> {
        Ok(self.checked(id)?.grad.as_ref())
    }

    pub fn shape(&self, id: NodeId) -> Result<&Shape, AutodiffError> {
        Ok(&self.checked(id)?.shape)
    }

    /// Argmax indices recorded by a max-pool node. Returns `None` for any
    /// other op.
    pub fn pool_argmax(&self, id: NodeId) -> Result<Option<Arc<Vec<u32>>>, AutodiffError> {
        match &self.checked(id)?.op {
            Op::MaxPool3d { argmax, .. } => Ok(Some(Arc::clone(argmax))),
            _ => Ok(None),
        }
    }

    /// Mean/variance recorded by a batch-norm node, for running-stat updates.
    /// Returns `None` for any other op.
    #[allow(clippy::type_complexity)]
    pub fn batchnorm_stats(
        &self,
        id: NodeId,
    ) -> Result<Option<(Arc<Vec<f64>>, Arc<Vec<f64>>)>, AutodiffError> {
        match &self.checked(id)?.op {
            Op::BatchNorm { mean, var, .. } => Ok(Some((Arc::clone(mean), Arc::clone(var)))),
            _ => Ok(None),
        }
    }

    /// Drop the stored value of a node. Safe only when no backward rule will
    /// read it; see the module docs for the intended pattern.
    pub fn release_value(&mut self, id: NodeId) -> Result<(), AutodiffError> {
        self.checked(id)?;
        self.nodes[id].value = None;
        Ok(())
    }

    /// Clear every gradient, keeping values, so backward can run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ───────────── recording: leaves ─────────────

    /// Record a non-trainable input leaf.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf { trainable: false }, value)
    }

    /// Record a trainable parameter leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf { trainable: true }, value)
    }

    pub fn is_trainable(&self, id: NodeId) -> Result<bool, AutodiffError> {
        Ok(matches!(self.checked(id)?.op, Op::Leaf { trainable: true }))
    }

    // ───────────── recording: elementwise ─────────────

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        make: impl FnOnce(NodeId, NodeId) -> Op<T>,
        eval: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>, TensorError>,
    ) -> Result<NodeId, AutodiffError> {
        let va = self.value(a)?;
        let vb = self.value(b)?;
        let out = eval(va, vb)?;
        Ok(self.push(make(a, b), out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, Op::Add, |x, y| x.add(y))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, Op::Sub, |x, y| x.sub(y))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, Op::Mul, |x, y| x.mul(y))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, Op::Div, |x, y| x.div(y))
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, Op::Maximum, |x, y| x.maximum(y))
    }

    fn unary(
        &mut self,
        a: NodeId,
        make: impl FnOnce(NodeId) -> Op<T>,
        eval: impl FnOnce(&Tensor<T>) -> Tensor<T>,
    ) -> Result<NodeId, AutodiffError> {
        let out = eval(self.value(a)?);
        Ok(self.push(make(a), out))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId, AutodiffError> {
        self.unary(a, |x| Op::Scale(x, c), |v| v.scale(c))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, Op::Neg, |v| v.neg())
    }

    pub fn one_minus(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, Op::OneMinus, |v| v.one_minus())
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, Op::Relu, |v| v.relu())
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, Op::Sigmoid, |v| v.sigmoid())
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, Op::Tanh, |v| v.tanh_())
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, Op::Exp, |v| v.exp_())
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, Op::Ln, |v| v.ln_())
    }

    // ───────────── recording: matrix and shape ops ─────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, Op::Matmul, |x, y| x.matmul(y))
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(w, x, Op::Matvec, |a, b| a.matvec(b))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Shape) -> Result<NodeId, AutodiffError> {
        let out = self.value(a)?.reshape(shape)?;
        Ok(self.push(Op::Reshape(a), out))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let vals: Vec<&Tensor<T>> = parts
            .iter()
            .map(|&p| self.value(p))
            .collect::<Result<_, _>>()?;
        let out = Tensor::concat(&vals)?;
        Ok(self.push(Op::Concat(parts.to_vec()), out))
    }

    pub fn slice_time(&mut self, a: NodeId, t: usize) -> Result<NodeId, AutodiffError> {
        let out = self.value(a)?.slice_time(t)?;
        Ok(self.push(Op::SliceTime(a, t), out))
    }

    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let vals: Vec<&Tensor<T>> = parts
            .iter()
            .map(|&p| self.value(p))
            .collect::<Result<_, _>>()?;
        let out = Tensor::stack(&vals)?;
        Ok(self.push(Op::Stack(parts.to_vec()), out))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let out = Tensor::scalar(self.value(a)?.sum());
        Ok(self.push(Op::Sum(a), out))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let out = Tensor::scalar(self.value(a)?.mean());
        Ok(self.push(Op::Mean(a), out))
    }

    /// Mean of several single-element nodes (batch loss from sample losses).
    pub fn mean_of(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if parts.is_empty() {
            return Err(TensorError::RankError {
                op: "mean_of",
                msg: "no operands".into(),
            }
            .into());
        }
        let mut acc = 0.0f64;
        for &p in parts {
            acc += self.value(p)?.item()?.as_f64();
        }
        let out = Tensor::scalar(T::of_f64(acc / parts.len() as f64));
        Ok(self.push(Op::MeanOf(parts.to_vec()), out))
    }

    // ───────────── recording: layer ops ─────────────

    /// 3D convolution (2x2x2 kernel, stride 1, same padding).
    pub fn conv3d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        self.conv3d_inner(x, kernel, bias, true)
    }

    /// Convolution whose backward pass skips the input gradient — valid only
    /// when nothing upstream of `x` is trainable (e.g. the first layer).
    pub fn conv3d_no_input_grad(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        self.conv3d_inner(x, kernel, bias, false)
    }

    fn conv3d_inner(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        need_dx: bool,
    ) -> Result<NodeId, AutodiffError> {
        let out = layers::conv3d(self.value(x)?, self.value(kernel)?, self.value(bias)?)?;
        Ok(self.push(
            Op::Conv3d {
                x,
                kernel,
                bias,
                need_dx,
            },
            out,
        ))
    }

    pub fn maxpool3d(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let (out, argmax) = layers::maxpool3d(self.value(x)?)?;
        Ok(self.push(Op::MaxPool3d { x, argmax }, out))
    }

    /// Batch normalization with caller-supplied constant statistics.
    pub fn batchnorm_frozen(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Arc<Vec<f64>>,
        var: Arc<Vec<f64>>,
        eps: f64,
    ) -> Result<NodeId, AutodiffError> {
        let out = layers::batchnorm_apply(
            self.value(x)?,
            self.value(gamma)?,
            self.value(beta)?,
            &mean,
            &var,
            eps,
        )?;
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                self_stats: false,
            },
            out,
        ))
    }

    /// Batch normalization that computes statistics from `x` itself and
    /// differentiates through them.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, AutodiffError> {
        let (mean, var) = layers::batch_stats(&[self.value(x)?])?;
        let (mean, var) = (Arc::new(mean), Arc::new(var));
        let out = layers::batchnorm_apply(
            self.value(x)?,
            self.value(gamma)?,
            self.value(beta)?,
            &mean,
            &var,
            eps,
        )?;
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                self_stats: true,
            },
            out,
        ))
    }

    /// Dropout with an externally built mask (already scaled by 1/(1-rate)).
    pub fn dropout(&mut self, x: NodeId, mask: Tensor<T>) -> Result<NodeId, AutodiffError> {
        let out = self.value(x)?.mul(&mask)?;
        Ok(self.push(Op::Dropout { x, mask }, out))
    }

    /// Binary cross-entropy of a single-element probability node against a
    /// 0/1 target. Probabilities are clamped to [BCE_EPS, 1 - BCE_EPS]; the
    /// arithmetic runs in f64 regardless of T.
    pub fn bce(&mut self, p: NodeId, target: f64) -> Result<NodeId, AutodiffError> {
        let pv = self.value(p)?.item()?.as_f64();
        let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let loss = -(target * pc.ln() + (1.0 - target) * (1.0 - pc).ln());
        let out = Tensor::scalar(T::of_f64(loss));
        Ok(self.push(Op::Bce { p, target }, out))
    }

    // ───────────── backward ─────────────

    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        self.backward_impl(loss, false)
    }

    /// Backward that frees each non-leaf value and gradient once consumed.
    /// After it returns only leaf nodes still hold tensors.
    pub fn backward_release(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        self.backward_impl(loss, true)
    }

    fn backward_impl(&mut self, loss: NodeId, release: bool) -> Result<(), AutodiffError> {
        let loss_node = self.checked(loss)?;
        if loss_node.shape.count() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_node.shape.to_string()));
        }
        // Every sweep starts from zeroed gradients, so running backward,
        // zero_grad, backward again reproduces the first result bitwise.
        self.zero_grad();
        self.nodes[loss].grad = Some(Tensor::ones(Shape::of(&[1])));
        for id in (0..=loss).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            let g = self.nodes[id].grad.clone().expect("checked above");
            let contribs = self.vjp(id, &g)?;
            for (src, c) in contribs {
                self.accumulate(src, c)?;
            }
            if release && !matches!(self.nodes[id].op, Op::Leaf { .. }) {
                self.nodes[id].grad = None;
                self.nodes[id].value = None;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, c: Contrib<T>) -> Result<(), AutodiffError> {
        let shape = self.nodes[id].shape.clone();
        match c {
            Contrib::Full(t) => {
                debug_assert_eq!(*t.shape(), shape);
                match &mut self.nodes[id].grad {
                    Some(g) => g.add_assign(&t)?,
                    slot @ None => *slot = Some(t),
                }
            }
            Contrib::Slice { t, g } => {
                let inner = g.count();
                if self.nodes[id].grad.is_none() {
                    self.nodes[id].grad = Some(Tensor::zeros(shape));
                }
                let grad = self.nodes[id].grad.as_mut().expect("just set");
                let dst = &mut grad.data_mut()[t * inner..(t + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(g.data()) {
                    *d = *d + s;
                }
            }
        }
        Ok(())
    }

    /// Reduce a gradient to the shape of an input that may have been
    /// broadcast: a one-element operand combined with a larger one receives
    /// the sum of the elementwise gradient.
    fn reduce_to(&self, id: NodeId, g: Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        let want = &self.nodes[id].shape;
        if *g.shape() == *want {
            return Ok(g);
        }
        if want.count() == 1 {
            return Ok(Tensor::scalar(g.sum()).reshape(want.clone())?);
        }
        Err(TensorError::ShapeMismatch {
            op: "reduce_to",
            left: want.to_string(),
            right: g.shape().to_string(),
        }
        .into())
    }

    /// Materialize the value of `id` at the given shape (expanding a
    /// broadcast scalar if needed) for VJP rules that need elementwise
    /// access to both operands.
    fn value_at(&self, id: NodeId, shape: &Shape) -> Result<Tensor<T>, AutodiffError> {
        let v = self.value(id)?;
        if v.shape() == shape {
            Ok(v.clone())
        } else {
            Ok(Tensor::full(shape.clone(), v.item()?))
        }
    }

    fn vjp(&self, id: NodeId, g: &Tensor<T>) -> Result<Vec<(NodeId, Contrib<T>)>, AutodiffError> {
        use Contrib::Full;
        let node = &self.nodes[id];
        let out = match &node.op {
            Op::Leaf { .. } => vec![],
            Op::Add(a, b) => vec![
                (*a, Full(self.reduce_to(*a, g.clone())?)),
                (*b, Full(self.reduce_to(*b, g.clone())?)),
            ],
            Op::Sub(a, b) => vec![
                (*a, Full(self.reduce_to(*a, g.clone())?)),
                (*b, Full(self.reduce_to(*b, g.neg())?)),
            ],
            Op::Mul(a, b) => {
                let da = g.mul(self.value(*b)?)?;
                let db = g.mul(self.value(*a)?)?;
                vec![
                    (*a, Full(self.reduce_to(*a, da)?)),
                    (*b, Full(self.reduce_to(*b, db)?)),
                ]
            }
            Op::Div(a, b) => {
                let vb = self.value(*b)?;
                let da = g.div(vb)?;
                let db = g.mul(self.value(*a)?)?.div(&vb.mul(vb)?)?.neg();
                vec![
                    (*a, Full(self.reduce_to(*a, da)?)),
                    (*b, Full(self.reduce_to(*b, db)?)),
                ]
            }
            Op::Maximum(a, b) => {
                // Ties route the gradient to the left operand, matching the
                // forward tie rule.
                let va = self.value_at(*a, &node.shape)?;
                let vb = self.value_at(*b, &node.shape)?;
                let zero = T::zero();
                let da = g.zip_map(&va.sub(&vb)?, "max_da", |gv, d| {
                    if d >= zero {
                        gv
                    } else {
                        zero
                    }
                })?;
                let db = g.zip_map(&va.sub(&vb)?, "max_db", |gv, d| {
                    if d < zero {
                        gv
                    } else {
                        zero
                    }
                })?;
                vec![
                    (*a, Full(self.reduce_to(*a, da)?)),
                    (*b, Full(self.reduce_to(*b, db)?)),
                ]
            }
            Op::Scale(a, c) => vec![(*a, Full(g.scale(*c)))],
            Op::Neg(a) | Op::OneMinus(a) => vec![(*a, Full(g.neg()))],
            Op::Relu(a) => {
                let y = node.value.as_ref().ok_or(AutodiffError::ReleasedValue(id))?;
                let zero = T::zero();
                let da = g.zip_map(y, "relu_bw", |gv, yv| if yv > zero { gv } else { zero })?;
                vec![(*a, Full(da))]
            }
            Op::Sigmoid(a) => {
                let y = node.value.as_ref().ok_or(AutodiffError::ReleasedValue(id))?;
                let one = T::one();
                let da = g.zip_map(y, "sigmoid_bw", |gv, yv| gv * yv * (one - yv))?;
                vec![(*a, Full(da))]
            }
            Op::Tanh(a) => {
                let y = node.value.as_ref().ok_or(AutodiffError::ReleasedValue(id))?;
                let one = T::one();
                let da = g.zip_map(y, "tanh_bw", |gv, yv| gv * (one - yv * yv))?;
                vec![(*a, Full(da))]
            }
            Op::Exp(a) => {
                let y = node.value.as_ref().ok_or(AutodiffError::ReleasedValue(id))?;
                vec![(*a, Full(g.mul(y)?))]
            }
            Op::Ln(a) => vec![(*a, Full(g.div(self.value(*a)?)?))],
            Op::Matmul(a, b) => {
                let da = g.matmul_nt(self.value(*b)?)?;
                let db = self.value(*a)?.matmul_tn(g)?;
                vec![(*a, Full(da)), (*b, Full(db))]
            }
            Op::Matvec(w, x) => {
                let dw = g.outer(self.value(*x)?)?;
                let dx = self.value(*w)?.matvec_t(g)?;
                vec![(*w, Full(dw)), (*x, Full(dx))]
            }
            Op::Reshape(a) => {
                let da = g.reshape(self.nodes[*a].shape.clone())?;
                vec![(*a, Full(da))]
            }
            Op::Concat(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].shape.count();
                    let part = Tensor::new(
                        self.nodes[p].shape.clone(),
                        g.data()[off..off + len].to_vec(),
                    )?;
                    out.push((p, Full(part)));
                    off += len;
                }
                out
            }
            Op::SliceTime(a, t) => vec![(
                *a,
                Contrib::Slice {
                    t: *t,
                    g: g.clone(),
                },
            )],
            Op::Stack(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                for (i, &p) in parts.iter().enumerate() {
                    out.push((p, Full(g.slice_time(i)?)));
                }
                out
            }
            Op::Sum(a) => {
                let da = Tensor::full(self.nodes[*a].shape.clone(), g.item()?);
                vec![(*a, Full(da))]
            }
            Op::Mean(a) => {
                let n = T::of_f64(self.nodes[*a].shape.count() as f64);
                let da = Tensor::full(self.nodes[*a].shape.clone(), g.item()? / n);
                vec![(*a, Full(da))]
            }
            Op::MeanOf(parts) => {
                let n = T::of_f64(parts.len() as f64);
                let each = g.item()? / n;
                parts
                    .iter()
                    .map(|&p| (p, Full(Tensor::scalar(each))))
                    .collect()
            }
            Op::Conv3d {
                x,
                kernel,
                bias,
                need_dx,
            } => {
                let (dx, dk, db) =
                    layers::conv3d_backward(self.value(*x)?, self.value(*kernel)?, g, *need_dx)?;
                let mut out = vec![(*kernel, Full(dk)), (*bias, Full(db))];
                if let Some(dx) = dx {
                    out.push((*x, Full(dx)));
                }
                out
            }
            Op::MaxPool3d { x, argmax } => {
                let dx = layers::maxpool3d_backward(&self.nodes[*x].shape, argmax, g)?;
                vec![(*x, Full(dx))]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                self_stats,
            } => {
                let (dx, dgamma, dbeta) = if *self_stats {
                    layers::batchnorm_backward_train(
                        self.value(*x)?,
                        self.value(*gamma)?,
                        mean,
                        var,
                        *eps,
                        g,
                    )?
                } else {
                    layers::batchnorm_backward_frozen(
                        self.value(*x)?,
                        self.value(*gamma)?,
                        mean,
                        var,
                        *eps,
                        g,
                    )?
                };
                vec![(*x, Full(dx)), (*gamma, Full(dgamma)), (*beta, Full(dbeta))]
            }
            Op::Dropout { x, mask } => vec![(*x, Full(g.mul(mask)?))],
            Op::Bce { p, target } => {
                let pv = self.value(*p)?.item()?.as_f64();
                // The clamp is the identity on [BCE_EPS, 1 - BCE_EPS] and
                // constant outside, where the gradient vanishes.
                let dp = if (BCE_EPS..=1.0 - BCE_EPS).contains(&pv) {
                    -target / pv + (1.0 - target) / (1.0 - pv)
                } else {
                    0.0
                };
                let contrib = Tensor::scalar(T::of_f64(g.item()?.as_f64() * dp));
                vec![(*p, Full(contrib))]
            }
        };
        Ok(out)
    }

    /// Ids of all trainable leaves, in recording order.
    pub fn trainable_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf { trainable: true }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Gradient of a trainable leaf after backward; zeros if the loss never
    /// reached it.
    pub fn param_grad(&self, id: NodeId) -> Result<Tensor<T>, AutodiffError> {
        let node = self.checked(id)?;
        Ok(match &node.grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(node.shape.clone()),
        })
    }
}
