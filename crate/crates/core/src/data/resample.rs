//! Spatial and temporal conforming of raw volumes to network input shape.
//!
//! Three independent steps, composed by [`conform_fmri`] / [`conform_mri`]:
//!
//! 1. [`standardize_time`] — fix the number of frames of a 4D series by
//!    index selection (no interpolation across time).
//! 2. [`resample_trilinear`] — corner-aligned trilinear interpolation of
//!    each 3D volume onto the target grid.
//! 3. [`znormalize`] — zero-mean unit-variance scaling over the whole
//!    volume (population variance, f64 accumulation).
//!
//! All interpolation arithmetic runs in f64 and is cast back to the
//! element type at the end, so f32 and f64 tensors conform consistently.

use crate::tensor::{Scalar, Shape, Tensor};

use super::DataError;

/// Number of frames every fMRI series is standardized to.
pub const STANDARD_FRAMES: usize = 30;

/// Corner-aligned trilinear resampling of a rank-3 volume `[D, H, W]` onto
/// `target` `[D', H', W']`.
///
/// Grid positions map corners to corners: target index `i` samples source
/// coordinate `i * (n - 1) / (m - 1)`. Every axis of both grids must have
/// extent >= 2; a single-voxel axis has no geometry to interpolate over and
/// is rejected as [`DataError::DegenerateAxis`].
///
/// When a coordinate lands exactly on a source index the voxel is copied,
/// not blended, so identity resampling reproduces the input bit for bit.
pub fn resample_trilinear<T: Scalar>(
    vol: &Tensor<T>,
    target: [usize; 3],
) -> Result<Tensor<T>, DataError> {
    let dims = vol.shape().dims();
    let src: [usize; 3] = match dims {
        [d, h, w] => [*d, *h, *w],
        _ => {
            return Err(DataError::Tensor(crate::tensor::TensorError::RankError {
                op: "resample_trilinear",
                msg: format!("expected rank 3, got {}", dims.len()),
            }))
        }
    };
    for (axis, &e) in src.iter().enumerate() {
        if e < 2 {
            return Err(DataError::DegenerateAxis {
                side: "source",
                axis,
                extent: e,
            });
        }
    }
    for (axis, &e) in target.iter().enumerate() {
        if e < 2 {
            return Err(DataError::DegenerateAxis {
                side: "target",
                axis,
                extent: e,
            });
        }
    }

    // Per-axis sample positions, split into floor index and fraction.
    let axis_map = |m: usize, n: usize| -> Vec<(usize, f64)> {
        (0..m)
            .map(|i| {
                let x = i as f64 * (n - 1) as f64 / (m - 1) as f64;
                let lo = (x.floor() as usize).min(n - 2);
                (lo, x - lo as f64)
            })
            .collect()
    };
    let dm = axis_map(target[0], src[0]);
    let hm = axis_map(target[1], src[1]);
    let wm = axis_map(target[2], src[2]);

    let xd = vol.data();
    let (sh, sw) = (src[1] * src[2], src[2]);
    let mut out = Vec::with_capacity(target[0] * target[1] * target[2]);
    for &(d0, fd) in &dm {
        for &(h0, fh) in &hm {
            for &(w0, fw) in &wm {
                if fd == 0.0 && fh == 0.0 && fw == 0.0 {
                    out.push(xd[d0 * sh + h0 * sw + w0]);
                    continue;
                }
                let mut acc = 0.0f64;
                for (dd, wd) in [(0usize, 1.0 - fd), (1, fd)] {
                    if wd == 0.0 {
                        continue;
                    }
                    for (dh, wh) in [(0usize, 1.0 - fh), (1, fh)] {
                        if wh == 0.0 {
                            continue;
                        }
                        for (dw, ww) in [(0usize, 1.0 - fw), (1, fw)] {
                            if ww == 0.0 {
                                continue;
                            }
                            let v = xd[(d0 + dd) * sh + (h0 + dh) * sw + (w0 + dw)];
                            acc += wd * wh * ww * v.as_f64();
                        }
                    }
                }
                out.push(T::of_f64(acc));
            }
        }
    }
    Ok(Tensor::new(Shape::of(&target), out)?)
}

/// Standardizes the time axis of a `[T, D, H, W]` series to `target_t`
/// frames by index selection.
///
/// * More frames than needed: uniform subsampling, frame `i` takes source
///   index `round(i * (T - 1) / (target_t - 1))` (corner-aligned, keeps
///   first and last frames).
/// * Fewer frames: cyclic repetition, frame `i` takes index `i mod T`.
/// * `target_t == 1`: the first frame.
pub fn standardize_time<T: Scalar>(
    vol: &Tensor<T>,
    target_t: usize,
) -> Result<Tensor<T>, DataError> {
    let dims = vol.shape().dims();
    let (t, frame) = match dims {
        [t, d, h, w] => (*t, d * h * w),
        _ => {
            return Err(DataError::Tensor(crate::tensor::TensorError::RankError {
                op: "standardize_time",
                msg: format!("expected rank 4, got {}", dims.len()),
            }))
        }
    };
    if t == 0 || target_t == 0 {
        return Err(DataError::EmptyInput("time axis"));
    }
    let pick = |i: usize| -> usize {
        if target_t == 1 {
            0
        } else if t >= target_t {
            // round(i * (t-1) / (target_t-1)) in integer arithmetic.
            (2 * i * (t - 1) + (target_t - 1)) / (2 * (target_t - 1))
        } else {
            i % t
        }
    };
    let xd = vol.data();
    let mut out = Vec::with_capacity(target_t * frame);
    for i in 0..target_t {
        let s = pick(i) * frame;
        out.extend_from_slice(&xd[s..s + frame]);
    }
    let mut shape = [target_t, 0, 0, 0];
    shape[1..].copy_from_slice(&dims[1..]);
    Ok(Tensor::new(Shape::of(&shape), out)?)
}

/// Zero-mean unit-variance scaling over all elements of a volume
/// (population variance, two-pass f64 accumulation). A constant volume has
/// no scale to normalize and maps to all zeros.
pub fn znormalize<T: Scalar>(vol: &Tensor<T>) -> Result<Tensor<T>, DataError> {
    let n = vol.count();
    if n == 0 {
        return Err(DataError::EmptyInput("volume"));
    }
    let mean = vol.data().iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
    let var = vol
        .data()
        .iter()
        .map(|v| {
            let d = v.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    if var == 0.0 {
        return Ok(Tensor::zeros(vol.shape().clone()));
    }
    let inv_sd = 1.0 / var.sqrt();
    Ok(vol.map(|v| T::of_f64((v.as_f64() - mean) * inv_sd)))
}

/// Conforms a raw 4D fMRI series to network input: `t_len` frames, each
/// frame resampled to `spatial^3` (skipped when already there), then
/// z-normalized over the whole series, returned as
/// `[t_len, spatial, spatial, spatial, 1]` with the trailing channel axis
/// the convolution stack expects.
pub fn conform_fmri<T: Scalar>(
    vol: &Tensor<T>,
    t_len: usize,
    spatial: usize,
) -> Result<Tensor<T>, DataError> {
    let timed = standardize_time(vol, t_len)?;
    let dims = timed.shape().dims().to_vec();
    let spatial_src: [usize; 3] = [dims[1], dims[2], dims[3]];
    let target = [spatial, spatial, spatial];
    let spaced = if spatial_src == target {
        timed
    } else {
        let frame: usize = spatial_src.iter().product();
        let mut out = Vec::with_capacity(t_len * spatial * spatial * spatial);
        for i in 0..t_len {
            let f = Tensor::new(
                Shape::of(&spatial_src),
                timed.data()[i * frame..(i + 1) * frame].to_vec(),
            )?;
            out.extend_from_slice(resample_trilinear(&f, target)?.data());
        }
        Tensor::new(Shape::of(&[t_len, spatial, spatial, spatial]), out)?
    };
    let normed = znormalize(&spaced)?;
    Ok(normed.reshape(Shape::of(&[t_len, spatial, spatial, spatial, 1]))?)
}

/// Conforms a raw 3D structural volume to network input: resampled to
/// `spatial^3` if needed, z-normalized, returned as
/// `[spatial, spatial, spatial, 1]`.
pub fn conform_mri<T: Scalar>(vol: &Tensor<T>, spatial: usize) -> Result<Tensor<T>, DataError> {
    let dims = vol.shape().dims();
    let vol3 = match dims {
        [d, h, w] => Tensor::new(Shape::of(&[*d, *h, *w]), vol.data().to_vec())?,
        [1, d, h, w] => Tensor::new(Shape::of(&[*d, *h, *w]), vol.data().to_vec())?,
        _ => {
            return Err(DataError::Tensor(crate::tensor::TensorError::RankError {
                op: "conform_mri",
                msg: format!("expected rank 3 or [1, D, H, W], got {}", dims.len()),
            }))
        }
    };
    let target = [spatial, spatial, spatial];
    let spaced = if vol3.shape().dims() == target {
        vol3
    } else {
        resample_trilinear(&vol3, target)?
    };
    let normed = znormalize(&spaced)?;
    Ok(normed.reshape(Shape::of(&[spatial, spatial, spatial, 1]))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;
    use rand::Rng;

    fn rand_vol(rng: &mut impl Rng, dims: &[usize]) -> Tensor<f64> {
        let n: usize = dims.iter().product();
        Tensor::new(
            Shape::of(dims),
            (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn resample_constant_stays_constant() {
        let v = Tensor::<f64>::full(Shape::of(&[3, 4, 5]), 2.5);
        let r = resample_trilinear(&v, [5, 3, 2]).unwrap();
        assert!(r.data().iter().all(|&x| (x - 2.5).abs() < 1e-12));
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let mut rng = seeded_rng(7);
        let v = rand_vol(&mut rng, &[4, 5, 3]);
        let r = resample_trilinear(&v, [4, 5, 3]).unwrap();
        let a: Vec<u64> = v.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = r.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn resample_downscales_a_ramp_exactly() {
        // Source 8^3 with value = x coordinate; target 4^3 samples
        // x = i * 7 / 3, so values [0, 7/3, 14/3, 7] on every output row.
        // Expected values computed from the sampling formula by hand.
        let mut data = Vec::with_capacity(512);
        for _d in 0..8 {
            for _h in 0..8 {
                for w in 0..8 {
                    data.push(w as f64);
                }
            }
        }
        let v = Tensor::new(Shape::of(&[8, 8, 8]), data).unwrap();
        let r = resample_trilinear(&v, [4, 4, 4]).unwrap();
        let expect = [0.0, 7.0 / 3.0, 14.0 / 3.0, 7.0];
        for d in 0..4 {
            for h in 0..4 {
                for w in 0..4 {
                    let got = r.at(&[d, h, w]).unwrap();
                    assert!(
                        (got - expect[w]).abs() < 1e-10,
                        "({d},{h},{w}): {got} vs {}",
                        expect[w]
                    );
                }
            }
        }
    }

    #[test]
    fn resample_is_exact_on_trilinear_fields() {
        // A field a + b*x + c*y + e*z + f*xy + g*xz + h*yz + k*xyz is
        // reproduced exactly by trilinear interpolation at any point, so
        // resampling to any grid must match the field evaluated there.
        let mut rng = seeded_rng(21);
        for round in 0..20 {
            let c: [f64; 8] = std::array::from_fn(|_| rng.random::<f64>() * 2.0 - 1.0);
            let field = |z: f64, y: f64, x: f64| {
                c[0] + c[1] * x
                    + c[2] * y
                    + c[3] * z
                    + c[4] * x * y
                    + c[5] * x * z
                    + c[6] * y * z
                    + c[7] * x * y * z
            };
            let src = [
                rng.random_range(2..6usize),
                rng.random_range(2..6usize),
                rng.random_range(2..6usize),
            ];
            let dst = [
                rng.random_range(2..7usize),
                rng.random_range(2..7usize),
                rng.random_range(2..7usize),
            ];
            let mut data = Vec::new();
            for d in 0..src[0] {
                for h in 0..src[1] {
                    for w in 0..src[2] {
                        data.push(field(d as f64, h as f64, w as f64));
                    }
                }
            }
            let v = Tensor::new(Shape::of(&src), data).unwrap();
            let r = resample_trilinear(&v, dst).unwrap();
            for d in 0..dst[0] {
                for h in 0..dst[1] {
                    for w in 0..dst[2] {
                        let z = d as f64 * (src[0] - 1) as f64 / (dst[0] - 1) as f64;
                        let y = h as f64 * (src[1] - 1) as f64 / (dst[1] - 1) as f64;
                        let x = w as f64 * (src[2] - 1) as f64 / (dst[2] - 1) as f64;
                        let want = field(z, y, x);
                        let got = r.at(&[d, h, w]).unwrap();
                        assert!(
                            (got - want).abs() < 1e-10,
                            "round {round} ({d},{h},{w}): {got} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn resample_rejects_degenerate_axes() {
        let v = Tensor::<f64>::full(Shape::of(&[1, 4, 4]), 0.0);
        match resample_trilinear(&v, [4, 4, 4]) {
            Err(DataError::DegenerateAxis {
                side: "source",
                axis: 0,
                extent: 1,
            }) => {}
            other => panic!("expected source DegenerateAxis, got {other:?}"),
        }
        let v = Tensor::<f64>::full(Shape::of(&[4, 4, 4]), 0.0);
        match resample_trilinear(&v, [4, 1, 4]) {
            Err(DataError::DegenerateAxis {
                side: "target",
                axis: 1,
                extent: 1,
            }) => {}
            other => panic!("expected target DegenerateAxis, got {other:?}"),
        }
    }

    #[test]
    fn time_axis_passthrough_is_bitwise() {
        let mut rng = seeded_rng(3);
        let v = rand_vol(&mut rng, &[30, 2, 2, 2]);
        let r = standardize_time(&v, 30).unwrap();
        let a: Vec<u64> = v.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = r.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn time_subsampling_keeps_ends_and_rounds_midpoints() {
        // 59 frames -> 30: index i maps to round(i * 58 / 29) = 2i.
        let t = 59;
        let mut data = Vec::new();
        for i in 0..t {
            data.push(i as f64);
        }
        let v = Tensor::new(Shape::of(&[t, 1, 1, 1]), data).unwrap();
        let r = standardize_time(&v, 30).unwrap();
        let want: Vec<f64> = (0..30).map(|i| (2 * i) as f64).collect();
        assert_eq!(r.data(), &want[..]);
    }

    #[test]
    fn time_subsampling_matches_real_rounding() {
        // 45 -> 30: integer formula must equal round(i * 44 / 29).
        let t = 45;
        let v = Tensor::new(
            Shape::of(&[t, 1, 1, 1]),
            (0..t).map(|i| i as f64).collect(),
        )
        .unwrap();
        let r = standardize_time(&v, 30).unwrap();
        for i in 0..30 {
            let want = (i as f64 * 44.0 / 29.0).round();
            assert_eq!(r.data()[i], want, "frame {i}");
        }
    }

    #[test]
    fn short_series_repeats_cyclically() {
        let t = 10;
        let v = Tensor::new(
            Shape::of(&[t, 1, 1, 1]),
            (0..t).map(|i| i as f64).collect(),
        )
        .unwrap();
        let r = standardize_time(&v, 30).unwrap();
        for i in 0..30 {
            assert_eq!(r.data()[i], (i % 10) as f64, "frame {i}");
        }
    }

    #[test]
    fn single_target_frame_takes_the_first() {
        let v = Tensor::new(Shape::of(&[5, 1, 1, 2]), (0..10).map(|i| i as f64).collect())
            .unwrap();
        let r = standardize_time(&v, 1).unwrap();
        assert_eq!(r.shape().dims(), &[1, 1, 1, 2]);
        assert_eq!(r.data(), &[0.0, 1.0]);
    }

    #[test]
    fn znormalize_centers_and_scales() {
        let mut rng = seeded_rng(5);
        let v = rand_vol(&mut rng, &[4, 4, 4]);
        let z = znormalize(&v).unwrap();
        let n = z.count() as f64;
        let mean = z.data().iter().sum::<f64>() / n;
        let var = z.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }

    #[test]
    fn znormalize_constant_maps_to_zeros() {
        let v = Tensor::<f64>::full(Shape::of(&[3, 3, 3]), 7.0);
        let z = znormalize(&v).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn znormalize_is_affine_invariant() {
        let mut rng = seeded_rng(9);
        let v = rand_vol(&mut rng, &[3, 4, 5]);
        let w = v.map(|x| x * 3.5 + 2.0);
        let zv = znormalize(&v).unwrap();
        let zw = znormalize(&w).unwrap();
        for (a, b) in zv.data().iter().zip(zw.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn conform_fmri_produces_network_shape() {
        let mut rng = seeded_rng(13);
        let v = rand_vol(&mut rng, &[12, 8, 9, 7]);
        let c = conform_fmri(&v, 30, 6).unwrap();
        assert_eq!(c.shape().dims(), &[30, 6, 6, 6, 1]);
        // Whole-series z-normalization.
        let n = c.count() as f64;
        let mean = c.data().iter().sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
    }

    #[test]
    fn conform_mri_produces_network_shape() {
        let mut rng = seeded_rng(17);
        let v = rand_vol(&mut rng, &[10, 10, 10]);
        let c = conform_mri(&v, 8).unwrap();
        assert_eq!(c.shape().dims(), &[8, 8, 8, 1]);
        // A leading unit time axis is accepted too.
        let v4 = v.reshape(Shape::of(&[1, 10, 10, 10])).unwrap();
        let c4 = conform_mri(&v4, 8).unwrap();
        assert_eq!(c4.data(), c.data());
    }

    #[test]
    fn conforming_twice_is_idempotent() {
        let mut rng = seeded_rng(19);
        let v = rand_vol(&mut rng, &[8, 8, 8, 8]);
        let once = conform_fmri(&v, 6, 4).unwrap();
        let back = once
            .reshape(Shape::of(&[6, 4, 4, 4]))
            .unwrap();
        let twice = conform_fmri(&back, 6, 4).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
