//! `QHNW` checkpoint container.
//!
//! ```text
//! magic "QHNW" | version u32
//! embed_dim u64 | rank u64 | model_dim u64 | layers u64 | heads u64
//! ffn_dim u64 | refine_steps u64 | control_carry u8
//! repeated until EOF:
//!   name_len u32 | name bytes | rows u64 | cols u64 | rows·cols f32
//! ```
//! All integers and floats are little-endian.

use std::collections::HashSet;
use std::path::Path;

use super::{HypernetConfig, HypernetParams};
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::tensor::Tensor2;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QHNW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &HypernetParams) -> Vec<u8> {
    let c = params.config();
    let mut w = ByteWriter::with_capacity(64 + params.parameter_count() * 4);
    w.put_bytes(CHECKPOINT_MAGIC);
    w.put_u32(CHECKPOINT_VERSION);
    for v in [c.embed_dim, c.rank, c.model_dim, c.layers, c.heads, c.ffn_dim, c.refine_steps] {
        w.put_u64(v as u64);
    }
    w.put_u8(u8::from(c.control_carry));
    for (name, t) in params.names().iter().zip(params.tensors()) {
        w.put_u32(name.len() as u32);
        w.put_bytes(name.as_bytes());
        w.put_u64(t.rows() as u64);
        w.put_u64(t.cols() as u64);
        w.put_f32s(t.data().iter().map(|&v| v as f32));
    }
    w.into_inner()
}

pub fn decode_checkpoint(path: &str, bytes: &[u8]) -> Result<HypernetParams> {
    let mut r = ByteReader::new(path, bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.expect_u32(CHECKPOINT_VERSION, "version")?;
    let mut dims = [0usize; 7];
    for (slot, what) in dims.iter_mut().zip([
        "embed_dim",
        "rank",
        "model_dim",
        "layers",
        "heads",
        "ffn_dim",
        "refine_steps",
    ]) {
        *slot = r.u64(what)? as usize;
    }
    let flag_at = r.offset();
    let control_carry = match r.u8("control_carry flag")? {
        0 => false,
        1 => true,
        _ => return Err(Error::format(path, flag_at, "control_carry flag 0 or 1")),
    };
    let config = HypernetConfig {
        embed_dim: dims[0],
        rank: dims[1],
        model_dim: dims[2],
        layers: dims[3],
        heads: dims[4],
        ffn_dim: dims[5],
        refine_steps: dims[6],
        control_carry,
    };
    config
        .validate()
        .map_err(|e| Error::format(path, 8, format!("a valid config ({e})")))?;
    let mut params = HypernetParams::zeroed(&config)?;
    let mut seen = HashSet::new();
    while !r.at_end() {
        let at = r.offset();
        let len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.bytes(len, "tensor name")?)
            .map_err(|_| Error::format(path, at + 4, "UTF-8 tensor name"))?
            .to_owned();
        let idx = params
            .index_of(&name)
            .ok_or_else(|| Error::format(path, at, format!("a known tensor name, found {name:?}")))?;
        if !seen.insert(idx) {
            return Err(Error::format(path, at, format!("tensor {name:?} only once")));
        }
        let shape_at = r.offset();
        let rows = r.u64("rows")? as usize;
        let cols = r.u64("cols")? as usize;
        let want = params.tensors()[idx].shape();
        if (rows, cols) != want {
            return Err(Error::format(
                path,
                shape_at,
                format!("{name} shaped {want:?}, found ({rows}, {cols})"),
            ));
        }
        let data = r.f32_vec(rows * cols, "tensor data")?;
        params.tensors_mut()[idx] = Tensor2::from_vec(rows, cols, data.into_iter().map(f64::from).collect())?;
    }
    if seen.len() != params.len() {
        let missing: Vec<&str> = params
            .names()
            .iter()
            .enumerate()
            .filter(|(i, _)| !seen.contains(i))
            .map(|(_, n)| n.as_str())
            .collect();
        return Err(Error::format(
            path,
            r.offset(),
            format!("tensors {}", missing.join(", ")),
        ));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &HypernetParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<HypernetParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&path.display().to_string(), &bytes)
}
