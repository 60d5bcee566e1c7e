//! The DBFT byte format: `"DBFT"`, version 0x01, u8 rank, little-endian u64
//! extents, then the row-major payload as little-endian f32. Values are
//! stored at f32 precision and widened back to f64 on load.

use std::path::Path;

use super::Tensor;
use crate::error::{CoreError, Result};

const MAGIC: &[u8; 4] = b"DBFT";
const VERSION: u8 = 0x01;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let rank = t.rank();
    assert!(rank <= u8::MAX as usize, "rank {rank} does not fit the format");
    let mut out = Vec::with_capacity(6 + rank * 8 + t.len() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(rank as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Decode one tensor that must span the whole buffer.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(CoreError::ingestion(
            format!("byte {used}"),
            format!("{} trailing bytes after tensor", bytes.len() - used),
        ));
    }
    Ok(t)
}

/// Decode one tensor from the front of the buffer, returning how many bytes
/// it consumed. Lets callers pack several tensors end to end.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
    if bytes.len() < 6 {
        return Err(CoreError::ingestion("byte 0", "buffer shorter than the fixed header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(CoreError::ingestion("byte 0", format!("bad magic {:?}", &bytes[0..4])));
    }
    if bytes[4] != VERSION {
        return Err(CoreError::ingestion(
            "byte 4",
            format!("unsupported version 0x{:02x}", bytes[4]),
        ));
    }
    let rank = bytes[5] as usize;
    let header = 6 + rank * 8;
    if bytes.len() < header {
        return Err(CoreError::ingestion("byte 6", "buffer ends inside the extent list"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 6 + i * 8;
        let e = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        shape.push(usize::try_from(e).map_err(|_| {
            CoreError::ingestion(format!("byte {off}"), format!("extent {e} too large"))
        })?);
    }
    let count: usize = shape.iter().product();
    let need = header + count * 4;
    if bytes.len() < need {
        return Err(CoreError::ingestion(
            format!("byte {}", bytes.len()),
            format!("payload truncated: need {need} bytes, have {}", bytes.len()),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = header + i * 4;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(CoreError::ingestion(
                format!("byte {off}"),
                format!("non-finite value {v}"),
            ));
        }
        data.push(v as f64);
    }
    Ok((Tensor::new(&shape, data)?, need))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = std::fs::read(&path)?;
    decode(&bytes).map_err(|e| match e {
        CoreError::Ingestion { location, detail } => CoreError::ingestion(
            format!("{}: {location}", path.as_ref().display()),
            detail,
        ),
        other => other,
    })
}
