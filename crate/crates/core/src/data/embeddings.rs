//! Pretrained token embedding tables: `"EMB1"`, u32 rows, u32 cols, then
//! row-major little-endian f32 values. Row `i` belongs to vocabulary id `i`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EMB1";

pub fn encode_embeddings(table: &Tensor) -> Result<Vec<u8>> {
    if table.rank() != 2 {
        return Err(Error::Invalid("embedding table must be a matrix".into()));
    }
    let mut out = Vec::with_capacity(12 + 4 * table.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(table.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(table.cols() as u32).to_le_bytes());
    for &v in table.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not an EMB1 embedding file".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[12..];
    if payload.len() != rows * cols * 4 {
        return Err(Error::Format(format!(
            "embedding payload is {} bytes, expected {} for {rows}x{cols}",
            payload.len(),
            rows * cols * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::new(vec![rows, cols], data)?)
}

pub fn save_embeddings(path: impl AsRef<Path>, table: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_embeddings(table)?).map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_embeddings(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
