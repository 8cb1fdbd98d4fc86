//! The `OCER` raster container: a minimal bit-exact array format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic   4 bytes  "OCER"
//! version u16      currently 1
//! dtype   u8       0 = f32, 1 = f64, 2 = c64 (f64 re, f64 im interleaved), 3 = u8 mask
//! ndim    u8
//! dims    ndim × u32
//! payload product(dims) × dtype size, row-major, innermost dimension last
//! ```
//!
//! The container stores raw arrays only; geometry metadata (pixel pitches,
//! wavenumber ranges) travels in the plain-text config files next to it.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::raster::Image;

pub const MAGIC: [u8; 4] = *b"OCER";
pub const VERSION: u16 = 1;

/// Typed payload of a raster file.
#[derive(Debug, Clone, PartialEq)]
pub enum RasterData {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    C64(ArrayD<Complex64>),
    Mask(ArrayD<u8>),
}

impl RasterData {
    pub fn dtype_code(&self) -> u8 {
        match self {
            RasterData::F32(_) => 0,
            RasterData::F64(_) => 1,
            RasterData::C64(_) => 2,
            RasterData::Mask(_) => 3,
        }
    }

    pub fn dtype_size(&self) -> usize {
        dtype_size(self.dtype_code()).unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            RasterData::F32(a) => a.shape(),
            RasterData::F64(a) => a.shape(),
            RasterData::C64(a) => a.shape(),
            RasterData::Mask(a) => a.shape(),
        }
    }
}

fn dtype_size(code: u8) -> Option<usize> {
    match code {
        0 => Some(4),
        1 => Some(8),
        2 => Some(16),
        3 => Some(1),
        _ => None,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialize to the container byte layout.
pub fn encode_raster(data: &RasterData) -> Result<Vec<u8>> {
    let dims = data.dims();
    for &d in dims {
        if d > u32::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "dimension {d} exceeds u32 range"
            )));
        }
    }
    let n: usize = dims.iter().product();
    let mut out = Vec::with_capacity(4 + 2 + 1 + 1 + 4 * dims.len() + n * data.dtype_size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(data.dtype_code());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match data {
        RasterData::F32(a) => {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        RasterData::F64(a) => {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        RasterData::C64(a) => {
            for v in a.iter() {
                out.extend_from_slice(&v.re.to_le_bytes());
                out.extend_from_slice(&v.im.to_le_bytes());
            }
        }
        RasterData::Mask(a) => {
            for &v in a.iter() {
                out.push(v);
            }
        }
    }
    Ok(out)
}

/// Parse container bytes; `path` is used only for error context.
pub fn decode_raster(bytes: &[u8], path: &Path) -> Result<RasterData> {
    let need = |expected: usize, got: usize| Error::TruncatedPayload {
        expected,
        got,
        path: path.to_path_buf(),
    };
    if bytes.len() < 8 {
        return Err(need(8, bytes.len()));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            version,
            path: path.to_path_buf(),
        });
    }
    let dtype = bytes[6];
    let size = dtype_size(dtype).ok_or(Error::UnsupportedDtype {
        code: dtype,
        path: path.to_path_buf(),
    })?;
    let ndim = bytes[7] as usize;
    let header_len = 8 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(need(header_len, bytes.len()));
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 8 + 4 * i;
        dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let n: usize = dims.iter().product();
    let expected = header_len + n * size;
    if bytes.len() != expected {
        return Err(need(expected, bytes.len()));
    }
    let payload = &bytes[header_len..];
    let shape = IxDyn(&dims);
    let data = match dtype {
        0 => RasterData::F32(
            ArrayD::from_shape_vec(
                shape,
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
            .expect("length checked"),
        ),
        1 => RasterData::F64(
            ArrayD::from_shape_vec(
                shape,
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
            .expect("length checked"),
        ),
        2 => RasterData::C64(
            ArrayD::from_shape_vec(
                shape,
                payload
                    .chunks_exact(16)
                    .map(|c| {
                        Complex64::new(
                            f64::from_le_bytes(c[0..8].try_into().unwrap()),
                            f64::from_le_bytes(c[8..16].try_into().unwrap()),
                        )
                    })
                    .collect(),
            )
            .expect("length checked"),
        ),
        3 => RasterData::Mask(
            ArrayD::from_shape_vec(shape, payload.to_vec()).expect("length checked"),
        ),
        _ => unreachable!(),
    };
    Ok(data)
}

/// Write an array to disk in the container layout.
pub fn write_raster(path: &Path, data: &RasterData) -> Result<()> {
    let bytes = encode_raster(data)?;
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    Ok(())
}

/// Read an array from disk, validating magic, version, dtype and length.
pub fn read_raster(path: &Path) -> Result<RasterData> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_raster(&bytes, path)
}

/// Export an image as binary PGM (P5, 8-bit) for human inspection.
///
/// Values are clamped to [0, 1] and quantized; this is lossy and never used
/// by tests or downstream processing.
pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    let (rows, cols) = img.data.dim();
    let mut out = Vec::with_capacity(rows * cols + 32);
    out.extend_from_slice(format!("P5\n{cols} {rows}\n255\n").as_bytes());
    for v in img.data.iter() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))?;
    Ok(())
}
