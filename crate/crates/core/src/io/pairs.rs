use std::path::Path;

use super::bin::{read_file, ByteReader, ByteWriter};
use crate::error::Result;

pub const MAGIC: &[u8; 4] = b"QPRS";
pub const VERSION: u32 = 1;

/// Row indices into the queries file and the targets file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TrainingPair {
    pub query_row: u64,
    pub target_row: u64,
}

pub fn encode_pairs(pairs: &[TrainingPair]) -> Vec<u8> {
    let mut w = ByteWriter::with_capacity(16 + pairs.len() * 16);
    w.put_bytes(MAGIC);
    w.put_u32(VERSION);
    w.put_u64(pairs.len() as u64);
    for p in pairs {
        w.put_u64(p.query_row);
        w.put_u64(p.target_row);
    }
    w.into_inner()
}

pub fn decode_pairs(path: &str, bytes: &[u8]) -> Result<Vec<TrainingPair>> {
    let mut r = ByteReader::new(path, bytes);
    r.magic(MAGIC)?;
    r.expect_u32(VERSION, "version")?;
    let count = r.u64("pair count")?;
    if (r.remaining() as u64) != count.saturating_mul(16) {
        return Err(r.fail(format!(
            "{count} pairs ({} bytes), found {} bytes",
            count.saturating_mul(16),
            r.remaining()
        )));
    }
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let query_row = r.u64("query row")?;
        let target_row = r.u64("target row")?;
        out.push(TrainingPair {
            query_row,
            target_row,
        });
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[TrainingPair]) -> Result<()> {
    std::fs::write(path, encode_pairs(pairs)).map_err(|e| crate::Error::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<TrainingPair>> {
    let bytes = read_file(path)?;
    decode_pairs(&path.display().to_string(), &bytes)
}
