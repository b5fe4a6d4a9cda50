//! Batch normalization over the channel (last) axis.
//!
//! Statistics are population mean/variance accumulated in f64 over every
//! non-channel element of the batch. Two application modes exist:
//!
//! * frozen: normalize with externally supplied statistics (running stats in
//!   evaluation, or batch stats captured mid-recording during training) that
//!   are treated as constants by the backward pass;
//! * train: statistics computed from the tensor itself, with the full
//!   backward pass that differentiates through mean and variance. This is
//!   the path gradient checks exercise.

use super::LayerError;
use crate::tensor::{Scalar, Tensor, TensorError};

/// Variance floor added before the square root.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum: `new = momentum * old + (1 - momentum) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

fn channel_count<T: Scalar>(xs: &[&Tensor<T>]) -> Result<usize, LayerError> {
    let first = xs.first().ok_or(TensorError::RankError {
        op: "batch_stats",
        msg: "empty batch".into(),
    })?;
    let c = *first.shape().dims().last().expect("rank >= 1");
    for x in xs {
        if *x.shape().dims().last().expect("rank >= 1") != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_stats",
                left: first.shape().to_string(),
                right: x.shape().to_string(),
            }
            .into());
        }
    }
    Ok(c)
}

/// Per-channel population mean and variance over a batch of tensors.
///
/// Every tensor contributes all its non-channel elements; tensors may have
/// different leading shapes as long as the channel extent matches.
pub fn batch_stats<T: Scalar>(xs: &[&Tensor<T>]) -> Result<(Vec<f64>, Vec<f64>), LayerError> {
    let c = channel_count(xs)?;
    let m: usize = xs.iter().map(|x| x.count() / c).sum();
    if m < 2 {
        return Err(LayerError::DegenerateBatch(m));
    }
    let mut mean = vec![0.0f64; c];
    for x in xs {
        for slot in x.data().chunks_exact(c) {
            for (acc, &v) in mean.iter_mut().zip(slot) {
                *acc += v.as_f64();
            }
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    let mut var = vec![0.0f64; c];
    for x in xs {
        for slot in x.data().chunks_exact(c) {
            for ((acc, &mu), &v) in var.iter_mut().zip(&mean).zip(slot) {
                let d = v.as_f64() - mu;
                *acc += d * d;
            }
        }
    }
    for v in &mut var {
        *v /= m as f64; // population variance: divide by m, not m - 1
    }
    Ok((mean, var))
}

/// Normalize with fixed statistics: `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn batchnorm_apply<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Tensor<T>, LayerError> {
    let c = *x.shape().dims().last().expect("rank >= 1");
    if gamma.count() != c || beta.count() != c || mean.len() != c || var.len() != c {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm_apply",
            left: x.shape().to_string(),
            right: format!("gamma {} beta {}", gamma.shape(), beta.shape()),
        }
        .into());
    }
    let mu: Vec<T> = mean.iter().map(|&v| T::of_f64(v)).collect();
    let inv: Vec<T> = var
        .iter()
        .map(|&v| T::of_f64(1.0 / (v + eps).sqrt()))
        .collect();
    let gs = gamma.data();
    let bs = beta.data();
    let mut out = vec![T::zero(); x.count()];
    for (oslot, xslot) in out.chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
        for ch in 0..c {
            oslot[ch] = (xslot[ch] - mu[ch]) * inv[ch] * gs[ch] + bs[ch];
        }
    }
    Ok(Tensor::new(x.shape().clone(), out)?)
}

/// Backward pass when the statistics are constants:
/// `dx = g * gamma / sqrt(var + eps)`, `dgamma = sum g * xhat`, `dbeta = sum g`.
pub fn batchnorm_backward_frozen<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), LayerError> {
    let c = gamma.count();
    let mu: Vec<T> = mean.iter().map(|&v| T::of_f64(v)).collect();
    let inv: Vec<T> = var
        .iter()
        .map(|&v| T::of_f64(1.0 / (v + eps).sqrt()))
        .collect();
    let gs = gamma.data();
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let mut dx = vec![T::zero(); x.count()];
    for ((dxslot, xslot), gslot) in dx
        .chunks_exact_mut(c)
        .zip(x.data().chunks_exact(c))
        .zip(g.data().chunks_exact(c))
    {
        for ch in 0..c {
            let xhat = (xslot[ch] - mu[ch]) * inv[ch];
            dgamma[ch] += (gslot[ch] * xhat).as_f64();
            dbeta[ch] += gslot[ch].as_f64();
            dxslot[ch] = gslot[ch] * gs[ch] * inv[ch];
        }
    }
    Ok((
        Tensor::new(x.shape().clone(), dx)?,
        Tensor::new(gamma.shape().clone(), dgamma.into_iter().map(T::of_f64).collect())?,
        Tensor::new(gamma.shape().clone(), dbeta.into_iter().map(T::of_f64).collect())?,
    ))
}

/// Backward pass when the statistics were computed from `x` itself
/// (differentiates through mean and variance):
///
/// ```text
/// dx_i = gamma * inv * (g_i - mean(g) - xhat_i * mean(g * xhat))
/// ```
pub fn batchnorm_backward_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), LayerError> {
    let c = gamma.count();
    let m = (x.count() / c) as f64;
    let mu: Vec<T> = mean.iter().map(|&v| T::of_f64(v)).collect();
    let inv: Vec<T> = var
        .iter()
        .map(|&v| T::of_f64(1.0 / (v + eps).sqrt()))
        .collect();
    let gs = gamma.data();

    // First pass: per-channel sums of g and g * xhat (also dgamma, dbeta).
    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for (xslot, gslot) in x.data().chunks_exact(c).zip(g.data().chunks_exact(c)) {
        for ch in 0..c {
            let xhat = (xslot[ch] - mu[ch]) * inv[ch];
            sum_g[ch] += gslot[ch].as_f64();
            sum_gx[ch] += (gslot[ch] * xhat).as_f64();
        }
    }
    let mean_g: Vec<T> = sum_g.iter().map(|&v| T::of_f64(v / m)).collect();
    let mean_gx: Vec<T> = sum_gx.iter().map(|&v| T::of_f64(v / m)).collect();

    let mut dx = vec![T::zero(); x.count()];
    for ((dxslot, xslot), gslot) in dx
        .chunks_exact_mut(c)
        .zip(x.data().chunks_exact(c))
        .zip(g.data().chunks_exact(c))
    {
        for ch in 0..c {
            let xhat = (xslot[ch] - mu[ch]) * inv[ch];
            dxslot[ch] = gs[ch] * inv[ch] * (gslot[ch] - mean_g[ch] - xhat * mean_gx[ch]);
        }
    }
    Ok((
        Tensor::new(x.shape().clone(), dx)?,
        Tensor::new(gamma.shape().clone(), sum_gx.into_iter().map(T::of_f64).collect())?,
        Tensor::new(gamma.shape().clone(), sum_g.into_iter().map(T::of_f64).collect())?,
    ))
}

/// Momentum update for running statistics, computed in f64.
pub fn update_running<T: Scalar>(running: &Tensor<T>, batch: &[f64], momentum: f64) -> Tensor<T> {
    let data: Vec<T> = running
        .data()
        .iter()
        .zip(batch)
        .map(|(&old, &new)| T::of_f64(momentum * old.as_f64() + (1.0 - momentum) * new))
        .collect();
    Tensor::new(running.shape().clone(), data).expect("same shape")
}
