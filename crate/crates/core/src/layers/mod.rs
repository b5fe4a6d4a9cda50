//! Pure (tape-free) layer kernels: 3D convolution, max pooling, batch
//! normalization, dense, dropout and the time-distributed wrapper.
//!
//! These functions are the single source of truth for layer numerics; the
//! autodiff tape and the evaluation path both call them, so a value computed
//! while recording is bitwise identical to the same value computed in eval.

mod batchnorm;
mod conv3d;
mod pool;

pub use batchnorm::{
    batch_stats, batchnorm_apply, batchnorm_backward_frozen, batchnorm_backward_train,
    update_running, BN_EPS, BN_MOMENTUM,
};
pub use conv3d::{conv3d, conv3d_backward, KERNEL_EXTENT};
pub use pool::{maxpool3d, maxpool3d_backward};

use crate::tensor::{sigmoid_scalar, Scalar, Shape, Tensor, TensorError};
use crate::util::seeded_stream_rng;
use rand::Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("batch normalization needs at least 2 values per channel, got {0}")]
    DegenerateBatch(usize),
    #[error("dropout rate must be in [0, 1), got {0}")]
    InvalidRate(f64),
    #[error("max pool needs every spatial extent >= 2, input is {0}")]
    PoolTooSmall(String),
}

/// Activation applied by a dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Linear => x.clone(),
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }

    pub fn apply_scalar<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Linear => v,
            Activation::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => sigmoid_scalar(v),
        }
    }
}

/// Fully connected layer: `act(w @ x + b)` with `w: [out, in]`, `x: [in]`.
pub fn dense<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    act: Activation,
) -> Result<Tensor<T>, LayerError> {
    let z = w.matvec(x)?.add(b)?;
    Ok(act.apply(&z))
}

/// Deterministic inverted-dropout mask.
///
/// Kept elements carry weight `1 / (1 - rate)` so the expected activation is
/// unchanged and evaluation needs no rescaling. The mask is a pure function
/// of `(seed, call)`: the RNG seed selects the run, the call counter selects
/// the forward pass within the run.
pub fn dropout_mask<T: Scalar>(
    shape: &Shape,
    rate: f64,
    seed: u64,
    call: u64,
) -> Result<Tensor<T>, LayerError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(LayerError::InvalidRate(rate));
    }
    let keep_scale = T::of_f64(1.0 / (1.0 - rate));
    let mut rng = seeded_stream_rng(seed, call);
    let data = (0..shape.count())
        .map(|_| {
            if rng.random::<f64>() >= rate {
                keep_scale
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(Tensor::new(shape.clone(), data)?)
}

/// Apply dropout in training mode: elementwise product with a fresh mask.
pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    rate: f64,
    seed: u64,
    call: u64,
) -> Result<(Tensor<T>, Tensor<T>), LayerError> {
    let mask = dropout_mask(x.shape(), rate, seed, call)?;
    let y = x.mul(&mask)?;
    Ok((y, mask))
}

/// Apply `f` to every leading-axis slice of `x` and stack the results.
pub fn time_distributed<T: Scalar, E>(
    x: &Tensor<T>,
    mut f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>, E>,
) -> Result<Tensor<T>, LayerError>
where
    LayerError: From<E>,
{
    let steps = *x
        .shape()
        .dims()
        .first()
        .expect("shape always has at least one axis");
    if x.rank() < 2 {
        return Err(LayerError::Tensor(TensorError::RankError {
            op: "time_distributed",
            msg: format!("need rank >= 2, got {}", x.shape()),
        }));
    }
    let mut outs = Vec::with_capacity(steps);
    for t in 0..steps {
        let slice = x.slice_time(t)?;
        outs.push(f(&slice)?);
    }
    let refs: Vec<&Tensor<T>> = outs.iter().collect();
    Ok(Tensor::stack(&refs)?)
}
