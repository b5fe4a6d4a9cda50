//! Single-file NIfTI-1 reading and writing.
//!
//! Scope: `.nii` / `.nii.gz` files with scalar voxel types u8, i16, i32,
//! f32 or f64, little- or big-endian, rank 3 or 4. The two-file
//! (`.hdr` + `.img`) form and NIfTI-2 are rejected with explicit errors.
//! Orientation metadata (sform/qform) is ignored: classification treats
//! volumes as already consistently oriented within a dataset.
//!
//! The 348-byte header is parsed field-by-field at the offsets fixed by
//! the published NIfTI-1 layout. Endianness is detected from `sizeof_hdr`:
//! it must read 348, so seeing the byte-swapped value 1543569408 means the
//! file uses the opposite byte order from ours.
//!
//! Voxel order in the file is x-fastest (x, y, z, t). A row-major tensor
//! `[T, Z, Y, X]` has exactly that linear layout, so reading is a relabel,
//! not a shuffle: the returned tensor is `[T, D, H, W]` with `T = 1` for
//! rank-3 files.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use thiserror::Error;

use crate::tensor::{Shape, Tensor, TensorError};

/// Header length that identifies NIfTI-1.
const HEADER_LEN: usize = 348;
/// `sizeof_hdr` of a byte-swapped NIfTI-1 header (348 with reversed bytes).
const HEADER_LEN_SWAPPED: u32 = 1_543_569_408;
/// `sizeof_hdr` of a NIfTI-2 header, recognized only to improve the error.
const NIFTI2_LEN: u32 = 540;
const NIFTI2_LEN_SWAPPED: u32 = 469_893_120;
/// Gzip stream magic.
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("not a single-file NIfTI-1 volume: {0}")]
    BadMagic(String),
    #[error("unsupported NIfTI datatype code {0} (supported: 2=u8, 4=i16, 8=i32, 16=f32, 64=f64)")]
    UnsupportedDatatype(i16),
    #[error("truncated NIfTI stream: needed {needed} bytes, got {got}")]
    TruncatedFile { needed: usize, got: usize },
    #[error("unsupported volume rank {0} (expected 3 or 4)")]
    UnsupportedRank(i16),
    #[error("corrupt NIfTI header: {0}")]
    Corrupt(String),
    #[error("i/o error on NIfTI stream: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The parsed subset of the NIfTI-1 header the engine uses.
#[derive(Debug, Clone)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    /// `dim[0]` is the rank; `dim[1..=rank]` are extents, x first.
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub magic: [u8; 4],
    /// True when the file's byte order is big-endian.
    pub big_endian: bool,
}

fn u16_at(b: &[u8], off: usize, be: bool) -> u16 {
    let raw = [b[off], b[off + 1]];
    if be {
        u16::from_be_bytes(raw)
    } else {
        u16::from_le_bytes(raw)
    }
}

fn i16_at(b: &[u8], off: usize, be: bool) -> i16 {
    u16_at(b, off, be) as i16
}

fn u32_at(b: &[u8], off: usize, be: bool) -> u32 {
    let raw = [b[off], b[off + 1], b[off + 2], b[off + 3]];
    if be {
        u32::from_be_bytes(raw)
    } else {
        u32::from_le_bytes(raw)
    }
}

fn f32_at(b: &[u8], off: usize, be: bool) -> f32 {
    f32::from_bits(u32_at(b, off, be))
}

fn datatype_bytes(code: i16) -> Option<usize> {
    match code {
        2 => Some(1),  // u8
        4 => Some(2),  // i16
        8 => Some(4),  // i32
        16 => Some(4), // f32
        64 => Some(8), // f64
        _ => None,
    }
}

fn parse_header(bytes: &[u8]) -> Result<NiftiHeader, NiftiError> {
    if bytes.len() < HEADER_LEN {
        return Err(NiftiError::TruncatedFile {
            needed: HEADER_LEN,
            got: bytes.len(),
        });
    }
    let first = u32_at(bytes, 0, false);
    let big_endian = match first {
        x if x == HEADER_LEN as u32 => false,
        HEADER_LEN_SWAPPED => true,
        NIFTI2_LEN | NIFTI2_LEN_SWAPPED => {
            return Err(NiftiError::BadMagic(
                "sizeof_hdr is 540: this is a NIfTI-2 file, which is not supported".into(),
            ))
        }
        other => {
            return Err(NiftiError::BadMagic(format!(
                "sizeof_hdr is {other}, expected 348"
            )))
        }
    };

    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    match &magic {
        b"n+1\0" => {}
        b"ni1\0" => {
            return Err(NiftiError::BadMagic(
                "magic \"ni1\" marks the two-file (.hdr/.img) form; only single-file .nii is supported"
                    .into(),
            ))
        }
        other => {
            return Err(NiftiError::BadMagic(format!(
                "magic bytes {:?} are neither \"n+1\" nor \"ni1\"",
                String::from_utf8_lossy(other)
            )))
        }
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = i16_at(bytes, 40 + 2 * i, big_endian);
    }
    let datatype = i16_at(bytes, 70, big_endian);
    let bitpix = i16_at(bytes, 72, big_endian);
    let vox_offset = f32_at(bytes, 108, big_endian);
    let scl_slope = f32_at(bytes, 112, big_endian);
    let scl_inter = f32_at(bytes, 116, big_endian);

    Ok(NiftiHeader {
        sizeof_hdr: HEADER_LEN as i32,
        dim,
        datatype,
        bitpix,
        vox_offset,
        scl_slope,
        scl_inter,
        magic,
        big_endian,
    })
}

/// Reads a NIfTI-1 volume from raw file bytes.
///
/// `gz` says whether the bytes are a gzip stream (see [`read_nifti_auto`]
/// for detection by magic). Returns the parsed header and the voxel data
/// as `[T, D, H, W]` (`T = 1` for rank-3 files), with `scl_slope` /
/// `scl_inter` applied when the slope is nonzero.
pub fn read_nifti(bytes: &[u8], gz: bool) -> Result<(NiftiHeader, Tensor<f32>), NiftiError> {
    let inflated;
    let raw: &[u8] = if gz {
        let mut dec = GzDecoder::new(bytes);
        let mut buf = Vec::new();
        dec.read_to_end(&mut buf)?;
        inflated = buf;
        &inflated
    } else {
        bytes
    };

    let header = parse_header(raw)?;
    let be = header.big_endian;

    let rank = header.dim[0];
    if rank != 3 && rank != 4 {
        return Err(NiftiError::UnsupportedRank(rank));
    }
    let rank = rank as usize;
    let mut extents = [1usize; 4]; // x, y, z, t
    for axis in 0..rank {
        let e = header.dim[1 + axis];
        if e < 1 {
            return Err(NiftiError::Corrupt(format!(
                "dim[{}] = {e}, expected >= 1",
                1 + axis
            )));
        }
        extents[axis] = e as usize;
    }
    let (nx, ny, nz, nt) = (extents[0], extents[1], extents[2], extents[3]);

    let elem = datatype_bytes(header.datatype)
        .ok_or(NiftiError::UnsupportedDatatype(header.datatype))?;
    if header.bitpix as usize != 8 * elem {
        return Err(NiftiError::Corrupt(format!(
            "bitpix {} does not match datatype {} ({} bytes)",
            header.bitpix, header.datatype, elem
        )));
    }

    if !header.vox_offset.is_finite() || header.vox_offset < HEADER_LEN as f32 {
        return Err(NiftiError::Corrupt(format!(
            "vox_offset {} is before the end of the header",
            header.vox_offset
        )));
    }
    let offset = header.vox_offset.round() as usize;

    let count = nx * ny * nz * nt;
    let needed = offset + count * elem;
    if raw.len() < needed {
        return Err(NiftiError::TruncatedFile {
            needed,
            got: raw.len(),
        });
    }
    let payload = &raw[offset..needed];

    // Decode to f64, apply scaling, narrow to f32. An f32 value with no
    // scaling survives the f64 round trip bit for bit.
    let scale = |v: f64| -> f32 {
        if header.scl_slope != 0.0 {
            (v * header.scl_slope as f64 + header.scl_inter as f64) as f32
        } else {
            v as f32
        }
    };
    let mut data = Vec::with_capacity(count);
    match header.datatype {
        2 => data.extend(payload.iter().map(|&b| scale(b as f64))),
        4 => data.extend(
            payload
                .chunks_exact(2)
                .map(|c| scale(i16_at(c, 0, be) as f64)),
        ),
        8 => data.extend(
            payload
                .chunks_exact(4)
                .map(|c| scale(u32_at(c, 0, be) as i32 as f64)),
        ),
        16 => data.extend(
            payload
                .chunks_exact(4)
                .map(|c| scale(f32_at(c, 0, be) as f64)),
        ),
        64 => data.extend(payload.chunks_exact(8).map(|c| {
            let raw: [u8; 8] = c.try_into().unwrap();
            let bits = if be {
                u64::from_be_bytes(raw)
            } else {
                u64::from_le_bytes(raw)
            };
            scale(f64::from_bits(bits))
        })),
        _ => unreachable!("datatype validated above"),
    }

    // File order is x-fastest with t slowest, which is exactly row-major
    // [T, Z, Y, X]: relabel, no data movement.
    let tensor = Tensor::new(Shape::of(&[nt, nz, ny, nx]), data)?;
    Ok((header, tensor))
}

/// Reads a NIfTI-1 volume, detecting gzip compression from the leading
/// `0x1f 0x8b` magic bytes.
pub fn read_nifti_auto(bytes: &[u8]) -> Result<(NiftiHeader, Tensor<f32>), NiftiError> {
    let gz = bytes.len() >= 2 && bytes[..2] == GZIP_MAGIC;
    read_nifti(bytes, gz)
}

/// Reads a `.nii` / `.nii.gz` file from disk.
pub fn read_nifti_file(path: &Path) -> Result<(NiftiHeader, Tensor<f32>), NiftiError> {
    let bytes = std::fs::read(path)?;
    read_nifti_auto(&bytes)
}

/// Writes a `[T, D, H, W]` (or `[D, H, W]`) f32 tensor as a single-file
/// NIfTI-1 volume. A 4D tensor with `T == 1` is written as rank 3, so a
/// write/read round trip reproduces both shape and voxel bits.
pub fn write_nifti(
    vol: &Tensor<f32>,
    big_endian: bool,
    gz: bool,
) -> Result<Vec<u8>, NiftiError> {
    let dims = vol.shape().dims();
    let (nt, nz, ny, nx) = match dims {
        [d, h, w] => (1usize, *d, *h, *w),
        [t, d, h, w] => (*t, *d, *h, *w),
        _ => {
            return Err(NiftiError::Corrupt(format!(
                "writer supports rank 3 or 4 volumes, got {}",
                vol.shape()
            )))
        }
    };
    let rank: i16 = if nt == 1 { 3 } else { 4 };

    let put16 = |buf: &mut [u8], off: usize, v: i16| {
        let b = if big_endian {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        };
        buf[off..off + 2].copy_from_slice(&b);
    };
    let put32f = |buf: &mut [u8], off: usize, v: f32| {
        let b = if big_endian {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        };
        buf[off..off + 4].copy_from_slice(&b);
    };

    // The data start 352 = 348-byte header + 4 bytes of padding, the
    // conventional offset for single-file NIfTI-1.
    let vox_offset = (HEADER_LEN + 4) as f32;
    let mut out = vec![0u8; HEADER_LEN + 4 + vol.count() * 4];
    {
        let hdr = &mut out[..HEADER_LEN];
        let sh = (HEADER_LEN as i32).to_le_bytes();
        let sh = if big_endian {
            (HEADER_LEN as i32).to_be_bytes()
        } else {
            sh
        };
        hdr[0..4].copy_from_slice(&sh);
        let dim: [i16; 8] = [rank, nx as i16, ny as i16, nz as i16, nt as i16, 1, 1, 1];
        for (i, d) in dim.iter().enumerate() {
            put16(hdr, 40 + 2 * i, *d);
        }
        put16(hdr, 70, 16); // datatype f32
        put16(hdr, 72, 32); // bitpix
        put32f(hdr, 108, vox_offset);
        put32f(hdr, 112, 0.0); // scl_slope 0: stored values are final
        put32f(hdr, 116, 0.0);
        hdr[344..348].copy_from_slice(b"n+1\0");
    }
    let mut at = HEADER_LEN + 4;
    for &v in vol.data() {
        let b = if big_endian {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        };
        out[at..at + 4].copy_from_slice(&b);
        at += 4;
    }

    if gz {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&out)?;
        Ok(enc.finish()?)
    } else {
        Ok(out)
    }
}
