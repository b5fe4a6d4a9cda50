//! 2x2x2 max pooling with stride 2.
//!
//! Output extents are the floor of input extent / 2; trailing odd slabs are
//! dropped. Each output voxel also records the linear input index of its
//! maximum (ties resolve to the lowest index), which the backward pass uses
//! to scatter the gradient.

use rayon::prelude::*;
use std::sync::Arc;

use super::LayerError;
use crate::tensor::{Scalar, Shape, Tensor};

/// Forward max pool. `x: [D,H,W,C]` -> (`[D/2,H/2,W/2,C]`, argmax indices).
pub fn maxpool3d<T: Scalar>(
    x: &Tensor<T>,
) -> Result<(Tensor<T>, Arc<Vec<u32>>), LayerError> {
    if x.rank() != 4 {
        return Err(crate::tensor::TensorError::RankError {
            op: "maxpool3d",
            msg: format!("input must be [D,H,W,C], got {}", x.shape()),
        }
        .into());
    }
    let dims = x.shape().dims();
    let (d_in, h_in, w_in, c) = (dims[0], dims[1], dims[2], dims[3]);
    let (d_out, h_out, w_out) = (d_in / 2, h_in / 2, w_in / 2);
    if d_out == 0 || h_out == 0 || w_out == 0 {
        return Err(LayerError::PoolTooSmall(x.shape().to_string()));
    }
    let xs = x.data();
    let n_out = d_out * h_out * w_out * c;
    let mut out = vec![T::zero(); n_out];
    let mut arg = vec![0u32; n_out];

    out.par_chunks_mut(w_out * c)
        .zip(arg.par_chunks_mut(w_out * c))
        .enumerate()
        .for_each(|(dh, (orow, arow))| {
            let od = dh / h_out;
            let oh = dh % h_out;
            for ow in 0..w_out {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0u32;
                    // Window scanned in increasing linear-index order, so a
                    // strict > keeps the lowest index on ties.
                    for i in 0..2 {
                        for j in 0..2 {
                            for l in 0..2 {
                                let idx = (((od * 2 + i) * h_in + (oh * 2 + j)) * w_in
                                    + (ow * 2 + l))
                                    * c
                                    + ch;
                                let v = xs[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx as u32;
                                }
                            }
                        }
                    }
                    orow[ow * c + ch] = best;
                    arow[ow * c + ch] = best_idx;
                }
            }
        });

    let out = Tensor::new(Shape::of(&[d_out, h_out, w_out, c]), out)?;
    Ok((out, Arc::new(arg)))
}

/// Backward max pool: route each output gradient to the input voxel that won
/// the forward max. Disjoint windows mean no index receives two writes.
pub fn maxpool3d_backward<T: Scalar>(
    input_shape: &Shape,
    argmax: &[u32],
    g: &Tensor<T>,
) -> Result<Tensor<T>, LayerError> {
    let mut dx = vec![T::zero(); input_shape.count()];
    for (&idx, &gv) in argmax.iter().zip(g.data()) {
        dx[idx as usize] = dx[idx as usize] + gv;
    }
    Ok(Tensor::new(input_shape.clone(), dx)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;
    use rand::Rng;

    /// Independent oracle: gather every window into a Vec and take max/argmin
    /// by explicit comparison over (value, index) pairs.
    fn pool_oracle(x: &Tensor<f64>) -> (Vec<f64>, Vec<u32>) {
        let dims = x.shape().dims();
        let (d_in, h_in, w_in, c) = (dims[0], dims[1], dims[2], dims[3]);
        let (d_o, h_o, w_o) = (d_in / 2, h_in / 2, w_in / 2);
        let mut vals = Vec::new();
        let mut args = Vec::new();
        for od in 0..d_o {
            for oh in 0..h_o {
                for ow in 0..w_o {
                    for ch in 0..c {
                        let mut window: Vec<(f64, u32)> = Vec::new();
                        for i in 0..2 {
                            for j in 0..2 {
                                for l in 0..2 {
                                    let idx = (((od * 2 + i) * h_in + (oh * 2 + j)) * w_in
                                        + (ow * 2 + l))
                                        * c
                                        + ch;
                                    window.push((x.data()[idx], idx as u32));
                                }
                            }
                        }
                        // Max value; among equal values the smallest index.
                        let best = window
                            .iter()
                            .copied()
                            .reduce(|a, b| {
                                if b.0 > a.0 {
                                    b
                                } else if b.0 < a.0 {
                                    a
                                } else if b.1 < a.1 {
                                    b
                                } else {
                                    a
                                }
                            })
                            .unwrap();
                        vals.push(best.0);
                        args.push(best.1);
                    }
                }
            }
        }
        (vals, args)
    }

    #[test]
    fn fixed_case_4x4x4() {
        // Put a recognizable max in each window of a 4^3 single-channel
        // volume: value = linear index, max of each window is its highest
        // corner (2d+1, 2h+1, 2w+1).
        let n = 64;
        let x = Tensor::new(
            Shape::of(&[4, 4, 4, 1]),
            (0..n).map(|v| v as f64).collect(),
        )
        .unwrap();
        let (y, arg) = maxpool3d(&x).unwrap();
        assert_eq!(y.shape().dims(), &[2, 2, 2, 1]);
        // Window (0,0,0): indices {0,1,4,5,16,17,20,21}, max 21.
        assert_eq!(y.data()[0], 21.0);
        assert_eq!(arg[0], 21);
        // Window (1,1,1): max at (3,3,3) = 63.
        assert_eq!(y.data()[7], 63.0);
        assert_eq!(arg[7], 63);
    }

    #[test]
    fn ties_pick_lowest_linear_index() {
        let x = Tensor::full(Shape::of(&[2, 2, 2, 1]), 3.25f64);
        let (y, arg) = maxpool3d(&x).unwrap();
        assert_eq!(y.data(), &[3.25]);
        assert_eq!(arg[0], 0);
    }

    #[test]
    fn odd_extents_truncate() {
        // 5x5x5 -> 2x2x2: input index 4 along each axis is never read.
        let mut data = vec![0.0f64; 125];
        // Poison the last slab with huge values; they must not appear.
        for d in 0..5 {
            for h in 0..5 {
                for w in 0..5 {
                    if d == 4 || h == 4 || w == 4 {
                        data[(d * 5 + h) * 5 + w] = 1e9;
                    }
                }
            }
        }
        let x = Tensor::new(Shape::of(&[5, 5, 5, 1]), data).unwrap();
        let (y, _) = maxpool3d(&x).unwrap();
        assert_eq!(y.shape().dims(), &[2, 2, 2, 1]);
        assert!(y.data().iter().all(|&v| v < 1e9));
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        let mut rng = seeded_rng(21);
        for round in 0..100 {
            let d = rng.random_range(2..7usize);
            let h = rng.random_range(2..7usize);
            let w = rng.random_range(2..7usize);
            let c = rng.random_range(1..4usize);
            let x = Tensor::new(
                Shape::of(&[d, h, w, c]),
                (0..d * h * w * c).map(|_| rng.random::<f64>() - 0.5).collect(),
            )
            .unwrap();
            let (y, arg) = maxpool3d(&x).unwrap();
            let (ov, oa) = pool_oracle(&x);
            assert_eq!(y.data(), &ov[..], "values, round {round}");
            assert_eq!(&arg[..], &oa[..], "argmax, round {round}");
        }
    }

    #[test]
    fn too_small_inputs_error() {
        let x = Tensor::<f64>::zeros(Shape::of(&[1, 4, 4, 2]));
        assert!(matches!(maxpool3d(&x), Err(LayerError::PoolTooSmall(_))));
    }

    #[test]
    fn backward_scatters_to_argmax() {
        let mut rng = seeded_rng(22);
        let x = Tensor::new(
            Shape::of(&[2, 2, 4, 2]),
            (0..32).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap();
        let (y, arg) = maxpool3d(&x).unwrap();
        let g = Tensor::new(
            y.shape().clone(),
            (0..y.count()).map(|i| (i + 1) as f64).collect(),
        )
        .unwrap();
        let dx = maxpool3d_backward(x.shape(), &arg, &g).unwrap();
        // Each output gradient lands exactly on its argmax; everything else 0.
        let mut want = vec![0.0; 32];
        for (o, &a) in arg.iter().enumerate() {
            want[a as usize] += g.data()[o];
        }
        assert_eq!(dx.data(), &want[..]);
        let nonzero = dx.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, y.count());
    }
}
