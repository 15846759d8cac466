//! PCT1 binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PCT1" | u16 version = 1 | u8 dtype = 1 (f64 LE) | u8 ndim | ndim × u32 dims
//!        | row-major f64 payload | u32 CRC32 of payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PCT1";
pub const VERSION: u16 = 1;
pub const DTYPE_F64: u8 = 1;

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let ndim = u8::try_from(t.shape().len())
        .map_err(|_| Error::shape(format!("{} dims exceed the PCT1 limit", t.shape().len())))?;
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 8 * t.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    out.push(ndim);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::shape(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    let payload_start = out.len();
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let format = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(format("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format(&format!("unsupported version {version}")));
    }
    if bytes[6] != DTYPE_F64 {
        return Err(format(&format!("unsupported dtype {}", bytes[6])));
    }
    let ndim = bytes[7] as usize;
    let header_len = 8 + 4 * ndim;
    if bytes.len() < header_len + 4 {
        return Err(format("truncated header"));
    }
    let shape: Vec<usize> = bytes[8..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected: usize = shape.iter().product();
    let payload = &bytes[header_len..bytes.len() - 4];
    if !payload.len().is_multiple_of(8) || payload.len() / 8 != expected {
        return Err(Error::ShapeHeaderMismatch {
            path: path.to_path_buf(),
            expected,
            actual: payload.len() / 8,
        });
    }
    let tail = &bytes[bytes.len() - 4..];
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            expected: stored,
            actual,
        });
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(format("non-finite value in payload"));
    }
    Tensor::new(shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
