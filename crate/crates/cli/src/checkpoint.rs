//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TRCE" | u32 version | u32 len | config JSON | u32 count |
//!   count × (u32 len | name | u32 rank | rank × u64 dim | numel × f32) |
//! 32-byte SHA-256 of everything before it
//! ```

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use trace_core::model::{ModelConfig, TraceModel};
use trace_core::tensor::Tensor;
use trace_core::ParamStore;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"TRCE";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub fn encode_checkpoint(model: &TraceModel) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.config).map_err(|e| CliError::Checkpoint(e.to_string()))?;
    put_u32(&mut buf, cfg.len())?;
    buf.extend_from_slice(&cfg);
    put_u32(&mut buf, model.store.len())?;
    for (_, p) in model.store.iter() {
        put_u32(&mut buf, p.name.len())?;
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, p.value.shape().len())?;
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

fn put_u32(buf: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| CliError::Checkpoint(format!("length {n} overflows u32")))?;
    buf.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CliError::Corrupt("truncated payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| CliError::Corrupt(format!("dimension {v} too large")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TraceModel> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(CliError::Corrupt("file too short".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(CliError::Corrupt("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CliError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CliError::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let n = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?)
        .map_err(|e| CliError::Corrupt(format!("config record: {e}")))?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| CliError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CliError::Corrupt(format!("tensor {name} is too large")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| CliError::Corrupt("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if store.id(&name).is_some() {
            return Err(CliError::Corrupt(format!("duplicate tensor {name}")));
        }
        store.add(name, Tensor::new(dims, data)?, false);
    }
    if r.pos != body.len() {
        return Err(CliError::Corrupt("trailing bytes after tensor table".into()));
    }
    if store.len() != count {
        return Err(CliError::Corrupt("tensor count mismatch".into()));
    }
    let model = TraceModel::from_store(config, &store)?;
    if model.store.len() != store.len() {
        return Err(CliError::Corrupt(format!(
            "checkpoint holds {} tensors, model expects {}",
            store.len(),
            model.store.len()
        )));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &TraceModel, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    let mut f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| CliError::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TraceModel> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_checkpoint(&bytes)
}
