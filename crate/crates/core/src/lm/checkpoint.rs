use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use super::model::{ModelConfig, TransformerLm};
use super::{LmError, Scalar};

const MAGIC: &[u8; 4] = b"EPLM";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Layout: magic, version byte, scalar tag byte, six little-endian u64
/// config fields, parameter count, parameters, SHA-256 of everything before
/// the digest.
pub fn save_checkpoint<T: Scalar, W: Write>(
    model: &TransformerLm<T>,
    mut sink: W,
) -> Result<(), LmError> {
    let cfg = model.config();
    let mut buf = Vec::with_capacity(64 + model.param_count() * T::BYTES);
    buf.extend_from_slice(MAGIC);
    buf.push(CHECKPOINT_VERSION);
    buf.push(T::TAG);
    for v in [
        cfg.embed,
        cfg.heads,
        cfg.layers,
        cfg.vocab_size,
        cfg.max_positions,
    ] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    buf.extend_from_slice(&cfg.seed.to_le_bytes());
    buf.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for &p in model.params() {
        p.write_le(&mut buf);
    }
    let digest = Sha256::digest(&buf);
    sink.write_all(&buf)?;
    sink.write_all(&digest)?;
    sink.flush()?;
    Ok(())
}

/// Loads a checkpoint, converting parameters if it was saved at another
/// precision.
pub fn load_checkpoint<T: Scalar, R: Read>(mut source: R) -> Result<TransformerLm<T>, LmError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(LmError::Corrupt("bad magic".into()));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(LmError::VersionMismatch {
            found: bytes[4],
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 32 + 6 {
        return Err(LmError::Corrupt("truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(LmError::Corrupt("checksum mismatch".into()));
    }
    let tag = body[5];
    let mut rest = &body[6..];
    let mut next_u64 = || -> Result<u64, LmError> {
        if rest.len() < 8 {
            return Err(LmError::Corrupt("truncated header".into()));
        }
        let (h, t) = rest.split_at(8);
        rest = t;
        Ok(u64::from_le_bytes(h.try_into().unwrap()))
    };
    let cfg = ModelConfig {
        embed: next_u64()? as usize,
        heads: next_u64()? as usize,
        layers: next_u64()? as usize,
        vocab_size: next_u64()? as usize,
        max_positions: next_u64()? as usize,
        seed: next_u64()?,
    };
    let count = next_u64()? as usize;
    let width = match tag {
        f32::TAG => f32::BYTES,
        f64::TAG => f64::BYTES,
        other => return Err(LmError::Corrupt(format!("unknown scalar tag {other}"))),
    };
    if rest.len() != count * width {
        return Err(LmError::Corrupt("parameter block has the wrong size".into()));
    }
    let params: Vec<T> = rest
        .chunks_exact(width)
        .map(|c| match tag {
            f32::TAG => T::of(f64::from(f32::read_le(c))),
            _ => T::of(f64::read_le(c)),
        })
        .collect();
    TransformerLm::from_params(cfg, params)
}
