//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   "DATN"
//! u32     format version (1)
//! config  u32 × 11: layers, heads, d_model, d_k, d_v, d_ff, src_vocab,
//!                   tgt_vocab, grid_len, d_feat, max_len
//!         f64 × 2:  p_drop_visual, p_drop_residual
//! u32     tensor count
//! tensor  u32 name length, UTF-8 name, u32 rank, u32 × rank extents,
//!         f64 × product(extents) values
//! ```

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DATN";
pub const CHECKPOINT_VERSION: u32 = 1;

const WHAT: &str = "checkpoint";

pub fn write_checkpoint(params: &ModelParams) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        c.layers, c.heads, c.d_model, c.d_k, c.d_v, c.d_ff, c.src_vocab, c.tgt_vocab, c.grid_len, c.d_feat,
        c.max_len,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.p_drop_visual.to_le_bytes());
    out.extend_from_slice(&c.p_drop_residual.to_le_bytes());
    out.extend_from_slice(&(params.store.len() as u32).to_le_bytes());
    for (_, name, t) in params.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Truncated { what: WHAT });
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<Float> {
        Ok(Float::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf: bytes };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { what: WHAT, found: magic });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion { what: WHAT, version });
    }
    let mut dims = [0usize; 11];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [layers, heads, d_model, d_k, d_v, d_ff, src_vocab, tgt_vocab, grid_len, d_feat, max_len] = dims;
    let config = ModelConfig {
        layers,
        heads,
        d_model,
        d_k,
        d_v,
        d_ff,
        src_vocab,
        tgt_vocab,
        grid_len,
        d_feat,
        max_len,
        p_drop_visual: r.f64()?,
        p_drop_residual: r.f64()?,
    };
    config.validate()?;
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::invalid("checkpoint: tensor name is not UTF-8"))?
            .to_owned();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or(Error::Truncated { what: WHAT })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| Float::from_le_bytes(c.try_into().unwrap()))
            .collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    if !r.buf.is_empty() {
        return Err(Error::invalid(format!("checkpoint: {} trailing bytes", r.buf.len())));
    }
    ModelParams::from_named(&config, named)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_checkpoint(params)).map_err(Error::at_path(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::at_path(path))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_k: 4,
            d_v: 4,
            d_ff: 12,
            src_vocab: 9,
            tgt_vocab: 11,
            grid_len: 4,
            d_feat: 5,
            p_drop_visual: 0.5,
            p_drop_residual: 0.1,
            max_len: 30,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = ModelParams::init(&cfg(), 17).unwrap();
        let bytes = write_checkpoint(&p);
        let q = read_checkpoint(&bytes).unwrap();
        assert_eq!(q.config, p.config);
        for ((_, na, a), (_, nb, b)) in p.store.iter().zip(q.store.iter()) {
            assert_eq!(na, nb);
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(write_checkpoint(&q), bytes);
    }

    #[test]
    fn distinct_errors() {
        let bytes = write_checkpoint(&ModelParams::init(&cfg(), 1).unwrap());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(read_checkpoint(&bad), Err(Error::UnsupportedVersion { .. })));
        assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
    }
}
