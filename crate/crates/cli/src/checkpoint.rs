//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "PPCK" | version u32 | header_len u32 | header (JSON)
//! n_params u32 | n_params × (name_len u16 | name | rows u32 | cols u32 | rows·cols × f64)
//! n_masks  u32 | n_masks  × (name_len u16 | name | rows u32 | cols u32 | rows·cols × u8)
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use patprune_core::model::{EncoderConfig, MaskSet, ModelParams};
use patprune_core::srste::KeepMask;
use patprune_core::Matrix;
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"PPCK";
pub const VERSION: u32 = 1;

/// Pipeline stage that produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Init,
    Dense,
    Admm,
    Pruned,
    Retrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    stage: Stage,
    model: EncoderConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub params: ModelParams,
    pub masks: Option<MaskSet>,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] patprune_core::Error),
}

fn write_name(w: &mut impl Write, name: &str) -> std::io::Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| std::io::Error::other("parameter name too long"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(name.as_bytes())
}

fn write_shape(w: &mut impl Write, m: &Matrix) -> std::io::Result<()> {
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        let header = serde_json::to_vec(&Header { stage: self.stage, model: self.params.config })
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.params.params.len() as u32).to_le_bytes())?;
        for p in &self.params.params {
            write_name(w, &p.name)?;
            write_shape(w, &p.value)?;
            for v in p.value.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        let masks = self.masks.as_ref();
        w.write_all(&(masks.map_or(0, |m| m.len()) as u32).to_le_bytes())?;
        for (name, km) in masks.into_iter().flatten() {
            write_name(w, name)?;
            write_shape(w, km.matrix())?;
            let bytes: Vec<u8> = km.matrix().as_slice().iter().map(|&v| v as u8).collect();
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory cannot fail");
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let header_len = read_u32(&mut r)? as usize;
        let header_bytes = take(&mut r, header_len)?;
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;

        let n_params = read_u32(&mut r)? as usize;
        let mut named = Vec::with_capacity(n_params.min(1024));
        for _ in 0..n_params {
            let (name, rows, cols) = read_entry_head(&mut r)?;
            let raw = take(&mut r, rows * cols * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
            named.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        let params = ModelParams::from_named(header.model, named)?;

        let n_masks = read_u32(&mut r)? as usize;
        let masks = if n_masks == 0 {
            None
        } else {
            let mut set = MaskSet::new();
            for _ in 0..n_masks {
                let (name, rows, cols) = read_entry_head(&mut r)?;
                let raw = take(&mut r, rows * cols)?;
                let data = raw.iter().map(|&b| b as f64).collect();
                let km = KeepMask::new(Matrix::from_vec(rows, cols, data)?)?;
                match params.get(&name) {
                    Some(w) if w.shape() == km.matrix().shape() => {}
                    _ => return Err(CheckpointError::Corrupt(format!("mask {name} does not match a parameter"))),
                }
                set.insert(name, km);
            }
            Some(set)
        };
        if !r.is_empty() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { stage: header.stage, params, masks })
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8], CheckpointError> {
    if r.len() < n {
        return Err(CheckpointError::Corrupt("unexpected end of file".into()));
    }
    let (head, rest) = r.split_at(n);
    *r = rest;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|_| CheckpointError::Corrupt("unexpected end of file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_entry_head(r: &mut &[u8]) -> Result<(String, usize, usize), CheckpointError> {
    let mut lb = [0u8; 2];
    read_exact(r, &mut lb)?;
    let name_bytes = take(r, u16::from_le_bytes(lb) as usize)?;
    let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    Ok((name, rows, cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use patprune_core::pattern::SparsityConfig;
    use patprune_core::trainer::hard_prune;

    fn small() -> ModelParams {
        let cfg = EncoderConfig { n_layers: 1, d_model: 8, n_heads: 2, d_ff: 8, vocab_size: 6, max_seq_len: 4, n_classes: 2 };
        ModelParams::init(cfg, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut params = small();
        params.params[0].value.as_mut_slice()[0] = -0.0;
        params.params[0].value.as_mut_slice()[1] = f64::MIN_POSITIVE / 4.0;
        let masks = hard_prune(&mut params, &SparsityConfig::default()).unwrap();
        let ck = Checkpoint { stage: Stage::Pruned, params, masks: Some(masks) };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.params.params[0].value.as_slice()[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_damage() {
        let ck = Checkpoint { stage: Stage::Init, params: small(), masks: None };
        let bytes = ck.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"NOPE"), Err(CheckpointError::BadMagic)));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Corrupt(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(CheckpointError::Corrupt(_))));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(CheckpointError::Version(2))));
    }
}
