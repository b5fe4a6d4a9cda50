//! 3D convolution with a fixed 2x2x2 kernel, stride 1 and "same" output
//! extent (one implicit zero slab before the data on each spatial axis):
//!
//! ```text
//! out[d,h,w,co] = bias[co] + sum over kd,kh,kw in {0,1}, ci of
//!                 in[d+kd-1, h+kh-1, w+kw-1, ci] * k[kd,kh,kw,ci,co]
//! ```
//!
//! Out-of-range taps contribute zero. The kernel tensor layout is
//! `[2, 2, 2, c_in, c_out]`, so for a fixed tap and input channel the
//! output-channel axis is contiguous.
//!
//! Convolution dominates the engine's runtime, so forward and backward each
//! have two implementations: a plain reference loop, and a register-tiled
//! kernel used when the vectorized channel axis is a multiple of
//! [`CHAN_TILE`]. The tiled kernels accumulate a small `[W_TILE][CHAN_TILE]`
//! block in registers across all taps before touching memory, which is what
//! lets the compiler keep the inner loop in vector FMAs instead of
//! re-loading the output slot once per tap and input channel. Both paths
//! visit the contributions of every output element in the same order
//! (taps ascending, then the summed channel ascending), so they produce
//! bitwise-identical results — asserted by tests below.

use rayon::prelude::*;

use super::LayerError;
use crate::tensor::{Scalar, Shape, Tensor, TensorError};

/// Spatial extent of every convolution kernel in the engine.
pub const KERNEL_EXTENT: usize = 2;

/// Channels per register tile: one AVX-512 vector of f32, two of f64.
const CHAN_TILE: usize = 16;
/// Spatial positions accumulated per register tile.
const W_TILE: usize = 4;

fn check_shapes<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize), LayerError> {
    if x.rank() != 4 {
        return Err(TensorError::RankError {
            op: "conv3d",
            msg: format!("input must be [D,H,W,Cin], got {}", x.shape()),
        }
        .into());
    }
    let dims = x.shape().dims();
    let (d, h, w, ci) = (dims[0], dims[1], dims[2], dims[3]);
    let kd = kernel.shape().dims();
    if kernel.rank() != 5
        || kd[0] != KERNEL_EXTENT
        || kd[1] != KERNEL_EXTENT
        || kd[2] != KERNEL_EXTENT
        || kd[3] != ci
    {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d",
            left: format!("input {}", x.shape()),
            right: format!("kernel {}", kernel.shape()),
        }
        .into());
    }
    let co = kd[4];
    if bias.rank() != 1 || bias.count() != co {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d",
            left: format!("kernel {}", kernel.shape()),
            right: format!("bias {}", bias.shape()),
        }
        .into());
    }
    Ok((d, h, w, ci, co))
}

/// Copies the input rows a given output row (d, h) reads into zero-padded
/// per-tap buffers, so the innermost loops need no bounds branches. Buffer
/// slot `j` holds spatial position `j - 1` along the padded axis (slot 0 is
/// the implicit zero slab). Returns which of the four (kd, kh) tap pairs
/// are in range.
#[inline]
fn fill_lead_padded_rows<T: Scalar>(
    src: &[T],
    d: usize,
    h: usize,
    d_ext: usize,
    h_ext: usize,
    w_ext: usize,
    chans: usize,
    scratch: &mut [T],
) -> [bool; 4] {
    let pstride = (w_ext + 1) * chans;
    let mut tap_ok = [false; 4];
    for kd in 0..KERNEL_EXTENT {
        let sd = d as isize + kd as isize - 1;
        if sd < 0 || sd >= d_ext as isize {
            continue;
        }
        for kh in 0..KERNEL_EXTENT {
            let sh = h as isize + kh as isize - 1;
            if sh < 0 || sh >= h_ext as isize {
                continue;
            }
            let tp = kd * KERNEL_EXTENT + kh;
            tap_ok[tp] = true;
            let row = ((sd as usize * h_ext + sh as usize) * w_ext) * chans;
            let dst = &mut scratch[tp * pstride..(tp + 1) * pstride];
            for z in dst[..chans].iter_mut() {
                *z = T::zero();
            }
            dst[chans..].copy_from_slice(&src[row..row + w_ext * chans]);
        }
    }
    tap_ok
}

/// One forward register tile: `WT` output positions x [`CHAN_TILE`] output
/// channels, accumulated over all taps and input channels before a single
/// store. Contributions are added in (kd, kh, kw, ci) order, matching the
/// reference loop element for element.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn fwd_tile<T: Scalar, const WT: usize>(
    orow: &mut [T],
    w0: usize,
    co: usize,
    co_blk: usize,
    bias_blk: &[T],
    ci: usize,
    ks: &[T],
    scratch: &[T],
    tap_ok: &[bool; 4],
    w_ext: usize,
) {
    let pstride = (w_ext + 1) * ci;
    let mut acc = [[T::zero(); CHAN_TILE]; WT];
    for a in acc.iter_mut() {
        a.copy_from_slice(bias_blk);
    }
    for tp in 0..4 {
        if !tap_ok[tp] {
            continue;
        }
        let pad = &scratch[tp * pstride..(tp + 1) * pstride];
        for kw in 0..KERNEL_EXTENT {
            let kbase = (tp * KERNEL_EXTENT + kw) * ci * co + co_blk;
            for c in 0..ci {
                let kvec = &ks[kbase + c * co..kbase + c * co + CHAN_TILE];
                for i in 0..WT {
                    // Padded slot j = w + kw maps to input position w + kw - 1.
                    let xv = pad[(w0 + i + kw) * ci + c];
                    for (av, &kv) in acc[i].iter_mut().zip(kvec) {
                        *av = *av + xv * kv;
                    }
                }
            }
        }
    }
    for (i, a) in acc.iter().enumerate() {
        let at = (w0 + i) * co + co_blk;
        orow[at..at + CHAN_TILE].copy_from_slice(a);
    }
}

fn conv3d_tiled<T: Scalar>(
    xs: &[T],
    ks: &[T],
    bs: &[T],
    d_ext: usize,
    h_ext: usize,
    w_ext: usize,
    ci: usize,
    co: usize,
    out: &mut [T],
) {
    let pstride = (w_ext + 1) * ci;
    out.par_chunks_mut(w_ext * co).enumerate().for_each_init(
        || vec![T::zero(); 4 * pstride],
        |scratch, (dh, orow)| {
            let d = dh / h_ext;
            let h = dh % h_ext;
            let tap_ok = fill_lead_padded_rows(xs, d, h, d_ext, h_ext, w_ext, ci, scratch);
            for co_blk in (0..co).step_by(CHAN_TILE) {
                let bias_blk = &bs[co_blk..co_blk + CHAN_TILE];
                let mut w = 0;
                while w + W_TILE <= w_ext {
                    fwd_tile::<T, W_TILE>(
                        orow, w, co, co_blk, bias_blk, ci, ks, scratch, &tap_ok, w_ext,
                    );
                    w += W_TILE;
                }
                if w + 2 <= w_ext {
                    fwd_tile::<T, 2>(
                        orow, w, co, co_blk, bias_blk, ci, ks, scratch, &tap_ok, w_ext,
                    );
                    w += 2;
                }
                if w < w_ext {
                    fwd_tile::<T, 1>(
                        orow, w, co, co_blk, bias_blk, ci, ks, scratch, &tap_ok, w_ext,
                    );
                }
            }
        },
    );
}

/// Reference forward loop; also the fallback when `c_out` is not a multiple
/// of the tile width.
fn conv3d_ref<T: Scalar>(
    xs: &[T],
    ks: &[T],
    bs: &[T],
    d_ext: usize,
    h_ext: usize,
    w_ext: usize,
    ci: usize,
    co: usize,
    out: &mut [T],
) {
    // One output row = all (w, co) values of a fixed (d, h). Rows are
    // independent, so splitting them across threads cannot change results.
    out.par_chunks_mut(w_ext * co).enumerate().for_each(|(dh, orow)| {
        let d = dh / h_ext;
        let h = dh % h_ext;
        for wslot in orow.chunks_mut(co) {
            wslot.copy_from_slice(bs);
        }
        for kd in 0..KERNEL_EXTENT {
            let sd = d as isize + kd as isize - 1;
            if sd < 0 || sd >= d_ext as isize {
                continue;
            }
            for kh in 0..KERNEL_EXTENT {
                let sh = h as isize + kh as isize - 1;
                if sh < 0 || sh >= h_ext as isize {
                    continue;
                }
                let in_row_base = ((sd as usize * h_ext + sh as usize) * w_ext) * ci;
                for kw in 0..KERNEL_EXTENT {
                    // sw = w + kw - 1 must lie in [0, W): kw=0 skips w=0.
                    let w_start = 1 - kw;
                    let tap_base = (((kd * KERNEL_EXTENT + kh) * KERNEL_EXTENT + kw) * ci) * co;
                    for c in 0..ci {
                        let krow = &ks[tap_base + c * co..tap_base + (c + 1) * co];
                        for w in w_start..w_ext {
                            let sw = w + kw - 1;
                            let xv = xs[in_row_base + sw * ci + c];
                            if xv == T::zero() {
                                continue;
                            }
                            let oslot = &mut orow[w * co..(w + 1) * co];
                            for (o, &kv) in oslot.iter_mut().zip(krow) {
                                *o = *o + xv * kv;
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Forward convolution. `x: [D,H,W,Cin]`, `kernel: [2,2,2,Cin,Cout]`,
/// `bias: [Cout]` -> `[D,H,W,Cout]`.
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, LayerError> {
    let (d_ext, h_ext, w_ext, ci, co) = check_shapes(x, kernel, bias)?;
    let mut out = vec![T::zero(); d_ext * h_ext * w_ext * co];
    if co % CHAN_TILE == 0 {
        conv3d_tiled(x.data(), kernel.data(), bias.data(), d_ext, h_ext, w_ext, ci, co, &mut out);
    } else {
        conv3d_ref(x.data(), kernel.data(), bias.data(), d_ext, h_ext, w_ext, ci, co, &mut out);
    }
    Ok(Tensor::new(Shape::of(&[d_ext, h_ext, w_ext, co]), out)?)
}

/// One input-gradient register tile: `WT` input positions x [`CHAN_TILE`]
/// input channels, accumulated over all taps and output channels.
/// Contributions are added in (kd, kh, kw, co) order, matching the
/// reference loop.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn dx_tile<T: Scalar, const WT: usize>(
    dxrow: &mut [T],
    sw0: usize,
    ci: usize,
    ci_blk: usize,
    co: usize,
    kt: &[T],
    scratch: &[T],
    tap_ok: &[bool; 4],
    w_ext: usize,
) {
    let pstride = (w_ext + 1) * co;
    let mut acc = [[T::zero(); CHAN_TILE]; WT];
    for tp in 0..4 {
        if !tap_ok[tp] {
            continue;
        }
        let pad = &scratch[tp * pstride..(tp + 1) * pstride];
        for kw in 0..KERNEL_EXTENT {
            let tbase = (tp * KERNEL_EXTENT + kw) * co * ci + ci_blk;
            for o in 0..co {
                let kvec = &kt[tbase + o * ci..tbase + o * ci + CHAN_TILE];
                for i in 0..WT {
                    // Padded slot j = sw - kw + 1 maps to output position
                    // sw - kw + 1, with slot w_ext being the zero pad.
                    let gv = pad[(sw0 + i + 1 - kw) * co + o];
                    for (av, &kv) in acc[i].iter_mut().zip(kvec) {
                        *av = *av + gv * kv;
                    }
                }
            }
        }
    }
    for (i, a) in acc.iter().enumerate() {
        let at = (sw0 + i) * ci + ci_blk;
        dxrow[at..at + CHAN_TILE].copy_from_slice(a);
    }
}

/// Copies the output-gradient rows an input row (sd, sh) reads into
/// zero-padded per-tap buffers. Slot `j` holds output position `j`; the
/// extra slot at `w_ext` is the zero pad reached by `sw - kw + 1 == w_ext`.
#[inline]
fn fill_trail_padded_rows<T: Scalar>(
    gs: &[T],
    sd: usize,
    sh: usize,
    d_ext: usize,
    h_ext: usize,
    w_ext: usize,
    co: usize,
    scratch: &mut [T],
) -> [bool; 4] {
    let pstride = (w_ext + 1) * co;
    let mut tap_ok = [false; 4];
    for kd in 0..KERNEL_EXTENT {
        let d = sd as isize - kd as isize + 1;
        if d < 0 || d >= d_ext as isize {
            continue;
        }
        for kh in 0..KERNEL_EXTENT {
            let h = sh as isize - kh as isize + 1;
            if h < 0 || h >= h_ext as isize {
                continue;
            }
            let tp = kd * KERNEL_EXTENT + kh;
            tap_ok[tp] = true;
            let row = ((d as usize * h_ext + h as usize) * w_ext) * co;
            let dst = &mut scratch[tp * pstride..(tp + 1) * pstride];
            dst[..w_ext * co].copy_from_slice(&gs[row..row + w_ext * co]);
            for z in dst[w_ext * co..].iter_mut() {
                *z = T::zero();
            }
        }
    }
    tap_ok
}

fn conv3d_dx_tiled<T: Scalar>(
    gs: &[T],
    kt: &[T],
    d_ext: usize,
    h_ext: usize,
    w_ext: usize,
    ci: usize,
    co: usize,
    dx: &mut [T],
) {
    let pstride = (w_ext + 1) * co;
    dx.par_chunks_mut(w_ext * ci).enumerate().for_each_init(
        || vec![T::zero(); 4 * pstride],
        |scratch, (sdh, dxrow)| {
            let sd = sdh / h_ext;
            let sh = sdh % h_ext;
            let tap_ok = fill_trail_padded_rows(gs, sd, sh, d_ext, h_ext, w_ext, co, scratch);
            for ci_blk in (0..ci).step_by(CHAN_TILE) {
                let mut sw = 0;
                while sw + W_TILE <= w_ext {
                    dx_tile::<T, W_TILE>(dxrow, sw, ci, ci_blk, co, kt, scratch, &tap_ok, w_ext);
                    sw += W_TILE;
                }
                if sw + 2 <= w_ext {
                    dx_tile::<T, 2>(dxrow, sw, ci, ci_blk, co, kt, scratch, &tap_ok, w_ext);
                    sw += 2;
                }
                if sw < w_ext {
                    dx_tile::<T, 1>(dxrow, sw, ci, ci_blk, co, kt, scratch, &tap_ok, w_ext);
                }
            }
        },
    );
}

/// Reference input-gradient loop over the transposed kernel; also the
/// fallback when `c_in` is not a multiple of the tile width.
fn conv3d_dx_ref<T: Scalar>(
    gs: &[T],
    kt: &[T],
    d_ext: usize,
    h_ext: usize,
    w_ext: usize,
    ci: usize,
    co: usize,
    dx: &mut [T],
) {
    dx.par_chunks_mut(w_ext * ci).enumerate().for_each(|(sdh, dxrow)| {
        let sd = sdh / h_ext;
        let sh = sdh % h_ext;
        for kd in 0..KERNEL_EXTENT {
            let d = sd as isize - kd as isize + 1;
            if d < 0 || d >= d_ext as isize {
                continue;
            }
            for kh in 0..KERNEL_EXTENT {
                let h = sh as isize - kh as isize + 1;
                if h < 0 || h >= h_ext as isize {
                    continue;
                }
                let g_row_base = ((d as usize * h_ext + h as usize) * w_ext) * co;
                for kw in 0..KERNEL_EXTENT {
                    // w = sw - kw + 1 in [0, W): kw=0 skips sw=W-1.
                    let sw_end = w_ext + kw - 1;
                    let tap_base = (((kd * KERNEL_EXTENT + kh) * KERNEL_EXTENT + kw) * co) * ci;
                    for sw in 0..sw_end {
                        let w = sw + 1 - kw;
                        let grow = &gs[g_row_base + w * co..g_row_base + (w + 1) * co];
                        let dslot = &mut dxrow[sw * ci..(sw + 1) * ci];
                        for (o, &gv) in grow.iter().enumerate() {
                            if gv == T::zero() {
                                continue;
                            }
                            let krow = &kt[tap_base + o * ci..tap_base + (o + 1) * ci];
                            for (dxe, &kv) in dslot.iter_mut().zip(krow) {
                                *dxe = *dxe + gv * kv;
                            }
                        }
                    }
                }
            }
        }
    });
}

/// One kernel-gradient register tile: `CT` input channels x [`CHAN_TILE`]
/// output channels of a fixed tap, accumulated over one spatial row.
#[inline(always)]
fn dk_tile<T: Scalar, const CT: usize>(
    dktap: &mut [T],
    c0: usize,
    ci: usize,
    co: usize,
    kw: usize,
    pad: &[T],
    grow: &[T],
    w_ext: usize,
) {
    for co_blk in (0..co).step_by(CHAN_TILE) {
        let mut acc = [[T::zero(); CHAN_TILE]; CT];
        for (i, a) in acc.iter_mut().enumerate() {
            let at = (c0 + i) * co + co_blk;
            a.copy_from_slice(&dktap[at..at + CHAN_TILE]);
        }
        for w in 0..w_ext {
            let gvec = &grow[w * co + co_blk..w * co + co_blk + CHAN_TILE];
            for i in 0..CT {
                let xv = pad[(w + kw) * ci + c0 + i];
                for (av, &gv) in acc[i].iter_mut().zip(gvec) {
                    *av = *av + xv * gv;
                }
            }
        }
        for (i, a) in acc.iter().enumerate() {
            let at = (c0 + i) * co + co_blk;
            dktap[at..at + CHAN_TILE].copy_from_slice(a);
        }
    }
}

/// Kernel gradient as a single serial sweep over output rows, accumulating
/// rank-one updates into the (L2-resident) gradient buffer. Per element the
/// spatial sum runs in (d, h, w) order, matching the reference loop.
#[allow(clippy::too_many_arguments)]
fn conv3d_dk_serial<T: Scalar>(
    xs: &[T],
    gs: &[T],
    d_ext: usize,
    h_ext: usize,
    w_ext: usize,
    ci: usize,
    co: usize,
    dk: &mut [T],
) {
    let pstride = (w_ext + 1) * ci;
    let mut scratch = vec![T::zero(); 4 * pstride];
    for d in 0..d_ext {
        for h in 0..h_ext {
            let tap_ok = fill_lead_padded_rows(xs, d, h, d_ext, h_ext, w_ext, ci, &mut scratch);
            let g_row = ((d * h_ext + h) * w_ext) * co;
            let grow = &gs[g_row..g_row + w_ext * co];
            for tp in 0..4 {
                if !tap_ok[tp] {
                    continue;
                }
                let pad = &scratch[tp * pstride..(tp + 1) * pstride];
                for kw in 0..KERNEL_EXTENT {
                    let tap = tp * KERNEL_EXTENT + kw;
                    let dktap = &mut dk[tap * ci * co..(tap + 1) * ci * co];
                    let mut c = 0;
                    while c + W_TILE <= ci {
                        dk_tile::<T, W_TILE>(dktap, c, ci, co, kw, pad, grow, w_ext);
                        c += W_TILE;
                    }
                    while c < ci {
                        dk_tile::<T, 1>(dktap, c, ci, co, kw, pad, grow, w_ext);
                        c += 1;
                    }
                }
            }
        }
    }
}

/// Reference kernel-gradient loop: one task per (tap, c_in) pair, each
/// owning a disjoint [Cout] slice of dK; also the fallback when `c_out` is
/// not a multiple of the tile width.
fn conv3d_dk_ref<T: Scalar>(
    xs: &[T],
    gs: &[T],
    d_ext: usize,
    h_ext: usize,
    w_ext: usize,
    ci: usize,
    co: usize,
    dk: &mut [T],
) {
    dk.par_chunks_mut(co).enumerate().for_each(|(slot, dkrow)| {
        let c = slot % ci;
        let tap = slot / ci;
        let kw = tap % KERNEL_EXTENT;
        let kh = (tap / KERNEL_EXTENT) % KERNEL_EXTENT;
        let kd = tap / (KERNEL_EXTENT * KERNEL_EXTENT);
        for d in 0..d_ext {
            let sd = d as isize + kd as isize - 1;
            if sd < 0 || sd >= d_ext as isize {
                continue;
            }
            for h in 0..h_ext {
                let sh = h as isize + kh as isize - 1;
                if sh < 0 || sh >= h_ext as isize {
                    continue;
                }
                let in_row_base = ((sd as usize * h_ext + sh as usize) * w_ext) * ci;
                let g_row_base = ((d * h_ext + h) * w_ext) * co;
                for w in (1 - kw)..w_ext {
                    let sw = w + kw - 1;
                    let xv = xs[in_row_base + sw * ci + c];
                    if xv == T::zero() {
                        continue;
                    }
                    let grow = &gs[g_row_base + w * co..g_row_base + (w + 1) * co];
                    for (acc, &gv) in dkrow.iter_mut().zip(grow) {
                        *acc = *acc + xv * gv;
                    }
                }
            }
        }
    });
}

/// Backward convolution: gradients of a scalar loss with respect to input,
/// kernel and bias given the output gradient `g: [D,H,W,Cout]`.
///
/// `need_dx` lets the caller skip the input gradient for the first layer of
/// a network, where nothing upstream consumes it.
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &Tensor<T>,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>), LayerError> {
    let dims = x.shape().dims();
    let (d_ext, h_ext, w_ext, ci) = (dims[0], dims[1], dims[2], dims[3]);
    let co = kernel.shape().dims()[4];
    let want_g = Shape::of(&[d_ext, h_ext, w_ext, co]);
    if *g.shape() != want_g {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d_backward",
            left: want_g.to_string(),
            right: g.shape().to_string(),
        }
        .into());
    }
    let xs = x.data();
    let ks = kernel.data();
    let gs = g.data();

    // dBias[co] = sum of g over all voxels. Serial pass, fixed order.
    let mut dbias64 = vec![0.0f64; co];
    for slot in gs.chunks_exact(co) {
        for (acc, &v) in dbias64.iter_mut().zip(slot) {
            *acc += v.as_f64();
        }
    }
    let dbias = Tensor::new(
        Shape::of(&[co]),
        dbias64.into_iter().map(T::of_f64).collect(),
    )?;

    // dK[kd,kh,kw,ci,co] = sum over voxels of x[tap voxel, ci] * g[voxel, co].
    let mut dk = vec![T::zero(); KERNEL_EXTENT * KERNEL_EXTENT * KERNEL_EXTENT * ci * co];
    if co % CHAN_TILE == 0 {
        conv3d_dk_serial(xs, gs, d_ext, h_ext, w_ext, ci, co, &mut dk);
    } else {
        conv3d_dk_ref(xs, gs, d_ext, h_ext, w_ext, ci, co, &mut dk);
    }
    let dk = Tensor::new(kernel.shape().clone(), dk)?;

    if !need_dx {
        return Ok((None, dk, dbias));
    }

    // dX[sd,sh,sw,ci] = sum over taps of k[tap,ci,:] . g[out voxel, :] where
    // the out voxel is (sd-kd+1, sh-kh+1, sw-kw+1). The kernel is transposed
    // once to [2,2,2,Cout,Cin] so the inner update runs contiguously over
    // Cin; the direct form's dot over Cout is a horizontal reduction that
    // does not vectorize. Every task writes only its own input row, so
    // parallelism is deterministic.
    let mut kt = vec![T::zero(); ks.len()];
    for tap in 0..KERNEL_EXTENT * KERNEL_EXTENT * KERNEL_EXTENT {
        let src = &ks[tap * ci * co..(tap + 1) * ci * co];
        let dst = &mut kt[tap * ci * co..(tap + 1) * ci * co];
        for c in 0..ci {
            for o in 0..co {
                dst[o * ci + c] = src[c * co + o];
            }
        }
    }
    let mut dx = vec![T::zero(); d_ext * h_ext * w_ext * ci];
    if ci % CHAN_TILE == 0 {
        conv3d_dx_tiled(gs, &kt, d_ext, h_ext, w_ext, ci, co, &mut dx);
    } else {
        conv3d_dx_ref(gs, &kt, d_ext, h_ext, w_ext, ci, co, &mut dx);
    }
    let dx = Tensor::new(x.shape().clone(), dx)?;

    Ok((Some(dx), dk, dbias))
}


#[cfg(test)]
mod bench {
    use super::*;
    use crate::tensor::{Shape, Tensor};
    use crate::util::seeded_rng;
    use rand::Rng;
    use std::time::Instant;

    fn rnd(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = seeded_rng(seed);
        let s = Shape::of(shape);
        let data = (0..s.count()).map(|_| rng.random::<f32>() - 0.5).collect();
        Tensor::new(s, data).unwrap()
    }

    fn min_time(mut f: impl FnMut()) -> std::time::Duration {
        f(); // warmup
        (0..3)
            .map(|_| {
                let t0 = Instant::now();
                f();
                t0.elapsed()
            })
            .min()
            .unwrap()
    }

    #[test]
    #[ignore = "timing probe, run manually"]
    fn bench_conv_fwd_bwd_per_block() {
        for (name, d, ci, co) in [
            ("fmri1", 28usize, 1usize, 64usize),
            ("fmri2", 14, 64, 128),
            ("fmri3", 7, 128, 256),
            ("mri1", 64, 1, 64),
            ("mri2", 32, 64, 128),
            ("mri3", 16, 128, 256),
            ("mri4", 8, 256, 256),
        ] {
            let x = rnd(&[d, d, d, ci], 1);
            let k = rnd(&[2, 2, 2, ci, co], 2);
            let b = rnd(&[co], 3);
            let fwd = min_time(|| {
                conv3d(&x, &k, &b).unwrap();
            });
            let g = rnd(&[d, d, d, co], 4);
            let bwd = min_time(|| {
                conv3d_backward(&x, &k, &g, true).unwrap();
            });
            let bwd_nodx = min_time(|| {
                conv3d_backward(&x, &k, &g, false).unwrap();
            });
            let macs = (d * d * d * co * 8 * ci) as f64;
            println!(
                "{name}: fwd {fwd:?} ({:.1} GMAC/s) bwd {bwd:?} bwd-no-dx {bwd_nodx:?}",
                macs / fwd.as_secs_f64() / 1e9
            );
        }
    }
}
