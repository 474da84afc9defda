use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, FormatError, Result};

pub const CHECKPOINT_FORMAT: &str = "WFCK1";
const MAGIC: &[u8; 4] = b"WFCK";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    param_count: usize,
}

/// `"WFCK"`, u32 LE header length, JSON header, then `f64` LE parameters in
/// flat-index order.
pub fn checkpoint_to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        format: CHECKPOINT_FORMAT.to_string(),
        config: params.config().clone(),
        param_count: params.len(),
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 8 {
        return Err(FormatError::Truncated {
            expected: 8,
            actual: bytes.len(),
        }
        .into());
    }
    if &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic {
            expected: "WFCK".into(),
            found: bytes[..4].to_vec(),
        }
        .into());
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(FormatError::Truncated {
            expected: 8 + hlen,
            actual: bytes.len(),
        }
        .into());
    }
    let header: Header =
        serde_json::from_slice(&bytes[8..8 + hlen]).map_err(|e| FormatError::Header(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(FormatError::Header(format!("format {:?}", header.format)).into());
    }
    let expected = 8 + hlen + 8 * header.param_count;
    if bytes.len() != expected {
        return Err(FormatError::Truncated {
            expected,
            actual: bytes.len(),
        }
        .into());
    }
    let values = bytes[8 + hlen..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ModelParams::from_values(&header.config, values).map_err(|e| match e {
        Error::Argument(m) => Error::ConfigMismatch(m),
        other => other,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
