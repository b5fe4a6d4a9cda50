//! Procedural 3D/4D head phantoms with a controllable class signal.
//!
//! Each phantom is a smooth ellipsoidal "head": a bright outer shell, a
//! dim gap, and a textured interior with a few ellipsoidal substructures,
//! plus Gaussian noise inside the head only — the background is exactly
//! zero before normalization. Structural volumes are generated at 64^3,
//! functional series at 30 frames of 28^3.
//!
//! The class signal lives in the functional series: three fixed regions
//! of interest carry sinusoidal time courses riding on tonic activation
//! offsets. The separation parameter `delta` skews the amplitudes and
//! tonic levels of regions 1 and 2 in opposite directions (and nudges
//! region 1's frequency) between the two classes. At `delta = 0` the
//! two class distributions are identical, giving a null-signal control;
//! the structural volume never depends on the label.
//!
//! Randomness discipline: everything derives from one `u64` seed through
//! ChaCha8 streams — stream 0 for the structural volume, streams 1 and 2
//! for functional labels 0 and 1. Streams are disjoint, so at `delta = 0`
//! the label carries no information at all. All parameter draws happen
//! before any voxel noise, and noise is drawn in raster order, so output
//! is a pure function of `(seed, label, delta)`, bit for bit.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::{Shape, Tensor};
use crate::util::{seeded_rng, seeded_stream_rng};

use super::{Volume3D, Volume4D, VolumeSource};

/// Structural phantom extents `[D, H, W]`.
pub const PHANTOM_MRI_DIMS: [usize; 3] = [64, 64, 64];
/// Functional phantom extents `[T, D, H, W]`.
pub const PHANTOM_FMRI_DIMS: [usize; 4] = [30, 28, 28, 28];
/// Default class separation for generated datasets.
pub const DEFAULT_SEPARATION: f64 = 0.5;

/// Phantom dataset request, as it appears in run configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// Number of samples; labels alternate 0, 1, 0, 1, ...
    pub count: usize,
    /// Class separation in [0, 1]; 0 is the null-signal control.
    pub delta: f64,
    /// Base seed; sample `i` uses `seed + i`.
    pub seed: u64,
}

/// Outer ellipsoid semi-axes as fractions of the volume extents.
const OUTER_AXIS_FRAC: [f64; 3] = [0.40, 0.34, 0.37];
/// Normalized-radius^2 where the bright shell starts (0.85^2).
const SHELL_R2: f64 = 0.7225;
/// Normalized-radius^2 where the interior ends (0.80^2).
const INTERIOR_R2: f64 = 0.64;
const SHELL_VALUE: f64 = 1.0;
const GAP_VALUE: f64 = 0.2;
const INTERIOR_BASE: f64 = 0.55;
/// Amplitude of each low-frequency interior texture cosine.
const TEXTURE_AMP: f64 = 0.1;
/// Noise sigma as a fraction of the pre-noise intensity range.
const NOISE_FRAC: f64 = 0.05;

/// Centers of the three functional regions of interest on the 28^3 grid,
/// all comfortably inside the interior for any drawn head geometry.
const ROI_CENTERS: [[f64; 3]; 3] = [
    [9.0, 9.5, 10.0],
    [18.5, 18.0, 10.5],
    [13.5, 10.0, 18.5],
];
/// Per-axis radius of each region of interest (soft-edged).
const ROI_RADIUS: f64 = 4.0;
/// Base signal frequencies in cycles per series for the three regions.
const ROI_CYCLES: [f64; 3] = [3.0, 5.0, 4.0];
/// Base signal amplitude before class skew.
const BASE_AMPLITUDE: f64 = 0.35;
/// Tonic activation offset at full separation. Regions 1 and 2 shift in
/// opposite directions with the class sign, so the spatial pattern of
/// sustained activation separates the classes on top of the dynamics.
const BASE_TONIC: f64 = 0.4;

struct TextureCosine {
    k: [f64; 3],
    phase: f64,
}

struct SubStructure {
    center: [f64; 3],
    axes: [f64; 3],
    delta: f64,
}

struct Anatomy {
    center: [f64; 3],
    axes: [f64; 3],
    cosines: [TextureCosine; 3],
    subs: Vec<SubStructure>,
}

/// Draws head geometry. The draw order is part of the format: center,
/// outer axes, three texture cosines (per cosine: three signed
/// frequencies, then phase), substructure count, then per substructure
/// center, axes, signed contrast.
fn draw_anatomy<R: Rng>(rng: &mut R, dims: [usize; 3]) -> Anatomy {
    let ext: [f64; 3] = [dims[0] as f64, dims[1] as f64, dims[2] as f64];
    let center: [f64; 3] = std::array::from_fn(|i| {
        ext[i] / 2.0 + rng.random_range(-ext[i] / 32.0..ext[i] / 32.0)
    });
    let axes: [f64; 3] = std::array::from_fn(|i| {
        OUTER_AXIS_FRAC[i] * ext[i] * (1.0 + rng.random_range(-0.05..0.05))
    });
    let cosines: [TextureCosine; 3] = std::array::from_fn(|_| {
        let k: [f64; 3] = std::array::from_fn(|i| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * TAU * rng.random_range(1.0..3.0) / ext[i]
        });
        let phase = rng.random_range(0.0..TAU);
        TextureCosine { k, phase }
    });
    let n_subs = rng.random_range(2..=4usize);
    let subs = (0..n_subs)
        .map(|_| {
            let sc: [f64; 3] =
                std::array::from_fn(|i| center[i] + rng.random_range(-0.5..0.5) * axes[i]);
            let sa: [f64; 3] = std::array::from_fn(|i| rng.random_range(0.06..0.14) * ext[i]);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            SubStructure {
                center: sc,
                axes: sa,
                delta: sign * rng.random_range(0.2..0.45),
            }
        })
        .collect();
    Anatomy {
        center,
        axes,
        cosines,
        subs,
    }
}

/// Evaluates the noiseless structural field on `dims`, returning the
/// values and the inside-head mask. Background voxels are exactly 0.
fn structural_field(anat: &Anatomy, dims: [usize; 3]) -> (Vec<f64>, Vec<bool>) {
    let n = dims[0] * dims[1] * dims[2];
    let mut vals = vec![0.0f64; n];
    let mut mask = vec![false; n];
    let mut idx = 0;
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let p = [d as f64, h as f64, w as f64];
                let r2: f64 = (0..3)
                    .map(|i| {
                        let u = (p[i] - anat.center[i]) / anat.axes[i];
                        u * u
                    })
                    .sum();
                if r2 <= 1.0 {
                    mask[idx] = true;
                    vals[idx] = if r2 >= SHELL_R2 {
                        SHELL_VALUE
                    } else if r2 > INTERIOR_R2 {
                        GAP_VALUE
                    } else {
                        let mut v = INTERIOR_BASE;
                        for c in &anat.cosines {
                            v += TEXTURE_AMP
                                * (c.k[0] * p[0] + c.k[1] * p[1] + c.k[2] * p[2] + c.phase)
                                    .cos();
                        }
                        for s in &anat.subs {
                            let rs2: f64 = (0..3)
                                .map(|i| {
                                    let u = (p[i] - s.center[i]) / s.axes[i];
                                    u * u
                                })
                                .sum();
                            if rs2 <= 1.0 {
                                v += s.delta;
                            }
                        }
                        v
                    };
                }
                idx += 1;
            }
        }
    }
    (vals, mask)
}

fn masked_range(vals: &[f64], mask: &[bool]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (v, m) in vals.iter().zip(mask) {
        if *m {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    (lo, hi)
}

/// Structural phantom before normalization: noisy values plus the
/// inside-head mask. Exposed to tests for the exact-zero-background
/// property, which z-normalization deliberately destroys.
fn mri_prenorm(seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = seeded_rng(seed);
    let anat = draw_anatomy(&mut rng, PHANTOM_MRI_DIMS);
    let (mut vals, mask) = structural_field(&anat, PHANTOM_MRI_DIMS);
    let (lo, hi) = masked_range(&vals, &mask);
    let sigma = NOISE_FRAC * (hi - lo);
    for (v, m) in vals.iter_mut().zip(&mask) {
        if *m {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    (vals, mask)
}

fn znorm_to_f32(vals: Vec<f64>, shape: Shape) -> Tensor<f32> {
    let t = Tensor::new(shape, vals).expect("phantom buffer matches its shape");
    super::resample::znormalize(&t)
        .expect("phantom volume is never empty")
        .cast::<f32>()
}

/// Generates the structural phantom for `seed`: a z-normalized 64^3
/// volume. Label-independent by construction.
pub fn generate_phantom_mri(seed: u64) -> Volume3D {
    let (vals, _) = mri_prenorm(seed);
    Volume3D {
        data: znorm_to_f32(vals, Shape::of(&PHANTOM_MRI_DIMS)),
        seed,
        source: VolumeSource::Phantom,
    }
}

/// Generates the functional phantom for `(seed, label)` at class
/// separation `delta`: a z-normalized `[30, 28, 28, 28]` series.
pub fn generate_phantom_fmri(seed: u64, label: u8, delta: f64) -> Volume4D {
    let mut rng = seeded_stream_rng(seed, 1 + label as u64);
    let dims3 = [
        PHANTOM_FMRI_DIMS[1],
        PHANTOM_FMRI_DIMS[2],
        PHANTOM_FMRI_DIMS[3],
    ];
    let frames = PHANTOM_FMRI_DIMS[0];
    let anat = draw_anatomy(&mut rng, dims3);
    let (base, mask) = structural_field(&anat, dims3);

    // Signal parameters: per-region frequency jitter and phase, drawn for
    // both classes identically so only the delta-skew separates them.
    let mut jitter = [0.0f64; 3];
    let mut phase = [0.0f64; 3];
    for j in 0..3 {
        jitter[j] = rng.random_range(-0.08..0.08);
        phase[j] = rng.random_range(0.0..TAU);
    }
    let s = if label == 1 { 1.0 } else { -1.0 };
    let amp = [
        BASE_AMPLITUDE * (1.0 + s * delta / 2.0),
        BASE_AMPLITUDE * (1.0 - s * delta / 2.0),
        BASE_AMPLITUDE,
    ];
    let tonic = [BASE_TONIC * s * delta, -BASE_TONIC * s * delta, 0.0];
    let freq = [
        ROI_CYCLES[0] * (1.0 + jitter[0]) * (1.0 + s * delta * 0.25),
        ROI_CYCLES[1] * (1.0 + jitter[1]),
        ROI_CYCLES[2] * (1.0 + jitter[2]),
    ];

    // Soft region-of-interest weights, fixed in space across samples.
    let frame_len = dims3[0] * dims3[1] * dims3[2];
    let mut weights = vec![[0.0f64; 3]; frame_len];
    let mut idx = 0;
    for d in 0..dims3[0] {
        for h in 0..dims3[1] {
            for w in 0..dims3[2] {
                let p = [d as f64, h as f64, w as f64];
                for (j, c) in ROI_CENTERS.iter().enumerate() {
                    let r2: f64 = (0..3)
                        .map(|i| {
                            let u = (p[i] - c[i]) / ROI_RADIUS;
                            u * u
                        })
                        .sum();
                    weights[idx][j] = (1.0 - r2).max(0.0);
                }
                idx += 1;
            }
        }
    }

    let (lo, hi) = masked_range(&base, &mask);
    let sigma = NOISE_FRAC * (hi - lo);

    let mut data = Vec::with_capacity(frames * frame_len);
    for t in 0..frames {
        let tt = t as f64 / frames as f64;
        let sig: [f64; 3] =
            std::array::from_fn(|j| amp[j] * (TAU * freq[j] * tt + phase[j]).sin());
        for v in 0..frame_len {
            let mut x = base[v];
            if mask[v] {
                let wv = &weights[v];
                x += wv[0] * (tonic[0] + sig[0])
                    + wv[1] * (tonic[1] + sig[1])
                    + wv[2] * (tonic[2] + sig[2]);
                x += sigma * rng.sample::<f64, _>(StandardNormal);
            }
            data.push(x);
        }
    }

    Volume4D {
        data: znorm_to_f32(data, Shape::of(&PHANTOM_FMRI_DIMS)),
        subject_id: format!("phantom-s{seed}-l{label}"),
        label,
        source: VolumeSource::Phantom,
    }
}

/// Generates `count` paired (functional, structural) phantoms with
/// alternating labels 0, 1, 0, 1, ...; sample `i` derives from
/// `seed + i`, so datasets with the same spec are byte-identical.
pub fn generate_phantom_dataset(count: usize, delta: f64, seed: u64) -> Vec<(Volume4D, Volume3D)> {
    (0..count)
        .map(|i| {
            let label = (i % 2) as u8;
            let s = seed + i as u64;
            (generate_phantom_fmri(s, label, delta), generate_phantom_mri(s))
        })
        .collect()
}
