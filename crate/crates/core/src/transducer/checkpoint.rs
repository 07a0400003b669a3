//! Binary checkpoints.
//!
//! Layout (little-endian): magic `TDCKPT1`; architecture as six `u32`
//! (F, E, H, J, V, downsample) and one `u8` attention flag; `u32` block
//! count; per block `u32` name length, UTF-8 name, `u64` element count,
//! `f64` values; finally a CRC-64/XZ of every preceding byte.

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use super::{ArchConfig, Model, Param};
use crate::error::{Error, Result};

const MAGIC: &[u8; 7] = b"TDCKPT1";
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn save_checkpoint(model: &Model) -> Vec<u8> {
    let a = model.arch();
    let mut out = Vec::with_capacity(64 + 8 * model.params().len());
    out.extend_from_slice(MAGIC);
    for d in [a.feature_dim, a.encoder_dim, a.label_dim, a.joiner_dim, a.vocab_size, a.downsample_factor] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(a.use_attention as u8);
    out.extend_from_slice(&(Param::ALL.len() as u32).to_le_bytes());
    for p in Param::ALL {
        let name = p.name().as_bytes();
        let values = model.block(p);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = CRC64.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a TDCKPT1 checkpoint".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if CRC64.checksum(payload) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: payload,
        pos: MAGIC.len(),
    };
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let use_attention = match r.take(1)?[0] {
        0 => false,
        1 => true,
        other => return Err(Error::Checkpoint(format!("bad attention flag {other}"))),
    };
    let arch = ArchConfig {
        feature_dim: dims[0],
        encoder_dim: dims[1],
        label_dim: dims[2],
        joiner_dim: dims[3],
        vocab_size: dims[4],
        downsample_factor: dims[5],
        use_attention,
    };
    let mut model = Model::zeros(arch).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut seen = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
        let p = Param::from_name(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter block `{name}`")))?;
        let n = r.u64()? as usize;
        let dst = model.block_mut(p);
        if n != dst.len() {
            return Err(Error::Checkpoint(format!(
                "block {name}: {n} values, architecture needs {}",
                dst.len()
            )));
        }
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("block too large".into()))?)?;
        for (d, c) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(c.try_into().unwrap());
        }
        seen.push(p);
    }
    if r.pos != payload.len() {
        return Err(Error::Checkpoint("trailing bytes after parameter blocks".into()));
    }
    if let Some(missing) = Param::ALL.into_iter().find(|p| !seen.contains(p)) {
        return Err(Error::Checkpoint(format!("missing parameter block {}", missing.name())));
    }
    Ok(model)
}

pub fn write_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, save_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}
