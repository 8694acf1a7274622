use std::path::Path;

use super::bin::{read_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::Tensor2;

pub const MAGIC: &[u8; 4] = b"QEMB";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
/// magic + version + dtype + N + E
pub const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingHeader {
    pub count: u64,
    pub dim: u64,
}

impl EmbeddingHeader {
    /// Parses and validates the header, including that the payload length
    /// matches `count × dim` f32 values exactly.
    pub fn parse(path: &str, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(path, bytes);
        r.magic(MAGIC)?;
        r.expect_u32(VERSION, "version")?;
        r.expect_u32(DTYPE_F32, "dtype (0 = f32)")?;
        let count = r.u64("row count")?;
        let dim = r.u64("dimension")?;
        if dim == 0 {
            return Err(Error::format(path, 20, "dimension > 0"));
        }
        let want = count
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::format(path, 12, "count × dim that fits in u64"))?;
        if r.remaining() as u64 != want {
            return Err(Error::format(
                path,
                HEADER_LEN as u64,
                format!("{want} payload bytes, found {}", r.remaining()),
            ));
        }
        Ok(Self { count, dim })
    }
}

pub fn encode_embeddings(m: &Tensor2<f32>) -> Vec<u8> {
    let mut w = ByteWriter::with_capacity(HEADER_LEN + m.data().len() * 4);
    w.put_bytes(MAGIC);
    w.put_u32(VERSION);
    w.put_u32(DTYPE_F32);
    w.put_u64(m.rows() as u64);
    w.put_u64(m.cols() as u64);
    w.put_f32s(m.data().iter().copied());
    w.into_inner()
}

pub fn write_embeddings(path: &Path, m: &Tensor2<f32>) -> Result<()> {
    std::fs::write(path, encode_embeddings(m)).map_err(|e| Error::io(path, e))
}

pub fn decode_embeddings(path: &str, bytes: &[u8]) -> Result<Tensor2<f32>> {
    let h = EmbeddingHeader::parse(path, bytes)?;
    let mut r = ByteReader::new(path, bytes);
    r.bytes(HEADER_LEN, "header")?;
    let n = (h.count * h.dim) as usize;
    let data = r.f32_vec(n, "embedding payload")?;
    Tensor2::from_vec(h.count as usize, h.dim as usize, data)
}

pub fn read_embeddings(path: &Path) -> Result<Tensor2<f32>> {
    let bytes = read_file(path)?;
    decode_embeddings(&path.display().to_string(), &bytes)
}

/// Newline-separated UTF-8 ids; line `i` names row `i`.
pub fn read_ids(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(text).map_err(|e| {
        Error::format(
            path.display().to_string(),
            e.utf8_error().valid_up_to() as u64,
            "UTF-8 text",
        )
    })?;
    Ok(text.lines().map(str::to_owned).collect())
}

pub fn write_ids(path: &Path, ids: &[String]) -> Result<()> {
    let mut s = String::with_capacity(ids.iter().map(|i| i.len() + 1).sum());
    for id in ids {
        s.push_str(id);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
