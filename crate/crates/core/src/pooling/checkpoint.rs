//! Pooler checkpoints.
//!
//! ```text
//! "AWP1" | u32 input_dim | u32 hidden_dim | u32 conv_kernel | u32 conv_stride
//!        | u32 n_heads | u32 max_positions | u64 seed | u64 param_count
//!        | param_count f32 (ParamLayout order)
//! ```
//! All integers and floats are little-endian.

use std::io::Write;
use std::path::Path;

use super::{PoolerConfig, PoolerParams};
use crate::error::{Error, Result};

pub const AWP_MAGIC: &[u8; 4] = b"AWP1";
const HEADER_LEN: usize = 4 + 6 * 4 + 8 + 8;

pub fn save_pooler(params: &PoolerParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let c = &params.config;
    let mut buf = Vec::with_capacity(HEADER_LEN + params.len() * 4);
    buf.extend_from_slice(AWP_MAGIC);
    for v in [c.input_dim, c.hidden_dim, c.conv_kernel, c.conv_stride, c.n_heads, c.max_positions] {
        let v = u32::try_from(v).map_err(|_| Error::invalid("pooler dimension exceeds u32"))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&c.seed.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in &params.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_pooler(path: impl AsRef<Path>) -> Result<PoolerParams<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint and checks it accepts `input_dim`-dimensional frames.
pub fn load_pooler_for(path: impl AsRef<Path>, input_dim: usize) -> Result<PoolerParams<f32>> {
    let p = load_pooler(path)?;
    if p.config.input_dim != input_dim {
        return Err(Error::InconsistentDimension {
            expected: input_dim,
            found: p.config.input_dim,
        });
    }
    Ok(p)
}

fn decode(bytes: &[u8]) -> Result<PoolerParams<f32>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != AWP_MAGIC {
        return Err(Error::Checkpoint("corrupted header".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let config = PoolerConfig {
        input_dim: u32_at(0),
        hidden_dim: u32_at(1),
        conv_kernel: u32_at(2),
        conv_stride: u32_at(3),
        n_heads: u32_at(4),
        max_positions: u32_at(5),
        seed: u64::from_le_bytes(bytes[28..36].try_into().unwrap()),
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("corrupted header: {e}")))?;
    let count = u64::from_le_bytes(bytes[36..44].try_into().unwrap()) as usize;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count.saturating_mul(4) {
        return Err(Error::Checkpoint(format!(
            "expected {} payload bytes, found {}",
            count.saturating_mul(4),
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    PoolerParams::from_values(config, values).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pooling::init_pooler;

    fn cfg() -> PoolerConfig {
        PoolerConfig {
            input_dim: 6,
            hidden_dim: 8,
            conv_kernel: 3,
            conv_stride: 1,
            n_heads: 4,
            max_positions: 7,
            seed: 42,
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.awp");
        let p = init_pooler(&cfg()).unwrap();
        save_pooler(&p, &path).unwrap();
        let q = load_pooler(&path).unwrap();
        assert_eq!(q.config, cfg());
        assert_eq!(
            p.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            q.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(load_pooler_for(&path, 6).is_ok());
        assert!(matches!(load_pooler_for(&path, 7), Err(Error::InconsistentDimension { .. })));
    }

    #[test]
    fn corrupted_checkpoints_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.awp");
        save_pooler(&init_pooler(&cfg()).unwrap(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        assert!(decode(&bytes).unwrap_err().to_string().contains("corrupted header"));
        bytes[0] = b'A';
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes()); // hidden_dim 7 vs 4 heads
        assert!(decode(&bytes).is_err());
        bytes[8..12].copy_from_slice(&8u32.to_le_bytes());
        assert!(decode(&bytes[..bytes.len() - 4]).is_err());
        assert!(decode(&bytes).is_ok());
    }
}
