//! Single-file model checkpoints.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "GFTCKPT\0"
//! version    u32
//! body_len   u64
//! body       body_len bytes
//! crc32      u32       CRC-32 (IEEE) of body
//! ```
//!
//! The body holds a JSON model configuration followed by binary tables:
//!
//! ```text
//! config_len u32, config JSON (UTF-8)
//! param_count u32, then per parameter:
//!     name_len u32, name (UTF-8), rank u32, rank × u64 dims, numel × f32
//! stage_count u32, then per GALA stage:
//!     num_patches u64, step_count u64, num_patches × f64 ema, num_patches × u8 seen
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gala::ImportanceState;
use crate::model::{GftModel, GftState, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GFTCKPT\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

pub fn to_bytes(model: &GftModel, state: &GftState) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    let config = serde_json::to_vec(&model.config).map_err(|e| Error::CheckpointFormat(e.to_string()))?;
    put_u32(&mut body, config.len())?;
    body.extend_from_slice(&config);

    put_u32(&mut body, model.params.len())?;
    for p in model.params.iter() {
        put_u32(&mut body, p.name.len())?;
        body.extend_from_slice(p.name.as_bytes());
        put_u32(&mut body, p.value.dims().len())?;
        for &d in p.value.dims() {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }

    put_u32(&mut body, state.stages.len())?;
    for s in &state.stages {
        body.extend_from_slice(&(s.num_patches() as u64).to_le_bytes());
        body.extend_from_slice(&s.step_count.to_le_bytes());
        for v in &s.ema {
            body.extend_from_slice(&v.to_le_bytes());
        }
        body.extend(s.seen.iter().map(|&b| u8::from(b)));
    }

    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    Ok(out)
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::CheckpointFormat(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CheckpointFormat(format!("record overruns body at offset {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::CheckpointFormat("length overflows usize".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(GftModel, GftState)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::CheckpointTruncated(format!(
            "{} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::CheckpointFormat("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let body_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let declared = (HEADER_LEN as u64).saturating_add(body_len).saturating_add(4);
    if (bytes.len() as u64) < declared {
        return Err(Error::CheckpointTruncated(format!(
            "header declares {declared} bytes, file has {}",
            bytes.len()
        )));
    }
    if (bytes.len() as u64) > declared {
        return Err(Error::CheckpointFormat(format!(
            "{} trailing bytes after checksum",
            bytes.len() as u64 - declared
        )));
    }
    let body = &bytes[HEADER_LEN..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::CheckpointChecksum { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 0 };
    let config_len = r.u32()?;
    let config: ModelConfig =
        serde_json::from_slice(r.take(config_len)?).map_err(|e| Error::CheckpointFormat(format!("config: {e}")))?;

    let count = r.u32()?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::CheckpointFormat("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::CheckpointFormat(format!("{name}: shape overflows")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::CheckpointFormat("payload overflows".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let value = Tensor::new(&dims, data).map_err(|e| Error::CheckpointFormat(format!("{name}: {e}")))?;
        params.push((name, value));
    }
    let model = GftModel::from_params(config, params).map_err(|e| Error::CheckpointFormat(e.to_string()))?;

    let stages = r.u32()?;
    if stages != model.config.num_stages() {
        return Err(Error::CheckpointFormat(format!(
            "{stages} importance states for {} stages",
            model.config.num_stages()
        )));
    }
    let mut state = GftState { stages: Vec::new() };
    for _ in 0..stages {
        let n = r.len_u64()?;
        if n != model.config.vit.num_patches() {
            return Err(Error::CheckpointFormat(format!("importance state covers {n} patches")));
        }
        let step_count = r.u64()?;
        let ema = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let seen = r.take(n)?.iter().map(|&b| b != 0).collect();
        state.stages.push(ImportanceState { ema, seen, step_count });
    }
    if r.pos != body.len() {
        return Err(Error::CheckpointFormat(format!("{} unread body bytes", body.len() - r.pos)));
    }
    Ok((model, state))
}

pub fn save(model: &GftModel, state: &GftState, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, state)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(GftModel, GftState)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (GftModel, GftState) {
        let model = GftModel::new(ModelConfig::desk(), 5).unwrap();
        let mut state = GftState::new(&model.config);
        state.stages[1].ema[3] = -0.125;
        state.stages[1].seen[3] = true;
        state.stages[1].step_count = 9;
        (model, state)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, state) = sample();
        let bytes = to_bytes(&model, &state).unwrap();
        let (m2, s2) = from_bytes(&bytes).unwrap();
        assert_eq!(m2.config, model.config);
        for (a, b) in model.params.iter().zip(m2.params.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(s2, state);
        assert_eq!(to_bytes(&m2, &s2).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_a_checksum_error() {
        let (model, state) = sample();
        let mut bytes = to_bytes(&model, &state).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(from_bytes(&bytes), Err(Error::CheckpointChecksum { .. })));
    }

    #[test]
    fn truncation_and_version_are_distinct() {
        let (model, state) = sample();
        let bytes = to_bytes(&model, &state).unwrap();
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 10]), Err(Error::CheckpointTruncated(_))));
        assert!(matches!(from_bytes(&bytes[..10]), Err(Error::CheckpointTruncated(_))));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(
            from_bytes(&v2),
            Err(Error::CheckpointVersion { found: 2, expected: 1 })
        ));
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::CheckpointFormat(_))));
    }
}
