//! `SFTN` tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size      | field                         |
//! |--------|-----------|-------------------------------|
//! | 0      | 4         | magic `b"SFTN"`               |
//! | 4      | 4         | version (`1`)                 |
//! | 8      | 4         | rank                          |
//! | 12     | 4         | dtype code (`0` = float32)    |
//! | 16     | 4 * rank  | dims, outermost first         |
//! | ...    | 4 * prod  | row-major float32 payload     |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub const TENSOR_MAGIC: &[u8; 4] = b"SFTN";
pub const TENSOR_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

/// An owned rank-N float32 tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().map(|&d| d as usize).product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} imply {n} elements, got {}",
                data.len()
            )));
        }
        Ok(RawTensor { dims, data })
    }

    pub fn from_tensor3(t: &Tensor3<f32>) -> Self {
        let (h, w, c) = t.shape();
        RawTensor {
            dims: vec![h as u32, w as u32, c as u32],
            data: t.as_slice().to_vec(),
        }
    }

    pub fn into_tensor3(self) -> Result<Tensor3<f32>> {
        match self.dims.as_slice() {
            &[h, w, c] => Tensor3::from_vec(h as usize, w as usize, c as usize, self.data),
            d => Err(Error::Format(format!("expected a rank-3 tensor, got dims {d:?}"))),
        }
    }
}

pub fn encode_tensor(t: &RawTensor, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for d in &t.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(t.data.len() * 4);
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_u32(buf: &[u8], pos: &mut usize) -> Result<u32> {
    let bytes = buf
        .get(*pos..*pos + 4)
        .ok_or_else(|| Error::Format("truncated tensor header".into()))?;
    *pos += 4;
    Ok(u32::from_le_bytes(bytes.try_into().expect("4 bytes")))
}

/// Decode one tensor starting at `*pos`, advancing `pos` past it.
pub fn decode_tensor(buf: &[u8], pos: &mut usize) -> Result<RawTensor> {
    let magic = buf
        .get(*pos..*pos + 4)
        .ok_or_else(|| Error::Format("truncated tensor header".into()))?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    *pos += 4;
    let version = read_u32(buf, pos)?;
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let rank = read_u32(buf, pos)? as usize;
    let dtype = read_u32(buf, pos)?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    if rank > 8 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(buf, pos)?);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    let bytes = n
        .checked_mul(4)
        .and_then(|b| buf.get(*pos..*pos + b))
        .ok_or_else(|| Error::Format(format!("truncated tensor payload, expected {n} floats")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    *pos += n * 4;
    Ok(RawTensor { dims, data })
}

pub fn tensor_to_bytes(t: &RawTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * t.dims.len() + 4 * t.data.len());
    encode_tensor(t, &mut out);
    out
}

pub fn tensor_from_bytes(buf: &[u8]) -> Result<RawTensor> {
    let mut pos = 0;
    let t = decode_tensor(buf, &mut pos)?;
    if pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor",
            buf.len() - pos
        )));
    }
    Ok(t)
}

/// Write through a sibling temp file and rename, so readers never observe a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_image(path: &Path, img: &Tensor3<f32>) -> Result<()> {
    write_atomic(path, &tensor_to_bytes(&RawTensor::from_tensor3(img)))
}

pub fn load_image(path: &Path) -> Result<Tensor3<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    tensor_from_bytes(&bytes)?.into_tensor3()
}

/// Binary PPM (P6) preview, values clamped to `[0, 1]` and rounded to 8 bits.
/// Single-channel images are replicated to gray.
pub fn ppm_bytes(img: &Tensor3<f32>) -> Vec<u8> {
    let (h, w, c) = img.shape();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = img.get(y, x, if c >= 3 { ch } else { 0 });
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}
