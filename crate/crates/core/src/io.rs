//! Binary tensor files and PGM/PPM image export.
//!
//! Tensor file layout, all integers little-endian:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `STSR`                   |
//! | 4      | 4    | version (u32, currently 1)     |
//! | 8      | 1    | dtype (0 = f32, 1 = f64)       |
//! | 9      | 1    | ndim (always 4)                |
//! | 10     | 16   | N, C, H, W as u32              |
//! | 26     | ...  | row-major payload              |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, StsError};
use crate::masks::Mask;
use crate::network::DataRange;
use crate::tensor::{DType, Real, Shape, Tensor4};

pub const MAGIC: &[u8; 4] = b"STSR";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 26;

/// A tensor read from disk in whichever precision it was stored.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor4<f32>),
    F64(Tensor4<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> Shape {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Convert to `T`; exact when `T` matches the stored dtype.
    pub fn into_real<T: Real>(self) -> Tensor4<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode_tensor<T: Real>(t: &Tensor4<T>) -> Result<Vec<u8>> {
    let s = t.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + s.numel() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(4);
    for (d, name) in s.as_array().into_iter().zip(["N", "C", "H", "W"]) {
        let v = u32::try_from(d).map_err(|_| StsError::format(format!("dims.{name}"), "exceeds u32"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn decode_payload<T: Real>(shape: Shape, payload: &[u8]) -> Result<Tensor4<T>> {
    let size = T::DTYPE.size_of();
    let data = payload.chunks_exact(size).map(T::read_le).collect();
    Tensor4::new(shape, data)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<AnyTensor> {
    if bytes.len() < HEADER_LEN {
        return Err(StsError::format(
            "header",
            format!("{} bytes, need {HEADER_LEN}", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(StsError::format(
            "magic",
            format!("expected STSR, found {:?}", &bytes[0..4]),
        ));
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(StsError::format("version", format!("unsupported version {version}")));
    }
    let dtype =
        DType::from_code(bytes[8]).ok_or_else(|| StsError::format("dtype", format!("unknown code {}", bytes[8])))?;
    if bytes[9] != 4 {
        return Err(StsError::format("ndim", format!("expected 4, found {}", bytes[9])));
    }
    let dims: Vec<usize> = (0..4).map(|k| u32_at(bytes, 10 + 4 * k) as usize).collect();
    if let Some(k) = dims.iter().position(|&d| d == 0) {
        return Err(StsError::format(
            format!("dims.{}", ["N", "C", "H", "W"][k]),
            "zero extent",
        ));
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let expected = shape
        .numel()
        .checked_mul(dtype.size_of())
        .ok_or_else(|| StsError::format("dims", "payload size overflows"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(StsError::format(
            "payload",
            format!("length {} bytes, expected {expected}", payload.len()),
        ));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(shape, payload)?),
        DType::F64 => AnyTensor::F64(decode_payload(shape, payload)?),
    })
}

pub fn write_tensor<T: Real>(path: &Path, t: &Tensor4<T>) -> Result<()> {
    let bytes = encode_tensor(t)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_tensor(&bytes)
}

/// Masks are stored as `1×1×H×W` tensors holding 0.0 and 1.0.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_tensor(path, &mask.to_tensor::<f32>())
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    match read_tensor(path)? {
        AnyTensor::F32(t) => Mask::from_tensor(&t),
        AnyTensor::F64(t) => Mask::from_tensor(&t),
    }
}

/// Which bands of a `1×B×H×W` tensor become the picture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageBands {
    /// Single band, written as binary PGM.
    Gray(usize),
    /// Red, green, blue band indices, written as binary PPM.
    Rgb([usize; 3]),
}

fn to_byte(v: f64, range: DataRange) -> u8 {
    let t = ((v - range.lo) / range.peak() * 255.0).round();
    if t.is_nan() {
        0
    } else {
        t.clamp(0.0, 255.0) as u8
    }
}

/// Encode batch item 0 as a binary PGM/PPM, scaling `range` linearly onto 0..255.
pub fn encode_image<T: Real>(x: &Tensor4<T>, bands: ImageBands, range: DataRange) -> Result<Vec<u8>> {
    let s = x.shape();
    let list: Vec<usize> = match bands {
        ImageBands::Gray(b) => vec![b],
        ImageBands::Rgb(rgb) => rgb.to_vec(),
    };
    if let Some(&b) = list.iter().find(|&&b| b >= s.c) {
        return Err(StsError::Argument(format!("band {b} out of range for {} bands", s.c)));
    }
    let magic = if list.len() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
    for i in 0..s.plane() {
        for &b in &list {
            out.push(to_byte(x.plane(0, b)[i].as_f64(), range));
        }
    }
    Ok(out)
}

pub fn export_image<T: Real>(x: &Tensor4<T>, bands: ImageBands, range: DataRange, path: &Path) -> Result<()> {
    let bytes = encode_image(x, bands, range)?;
    std::fs::write(path, bytes)?;
    Ok(())
}
