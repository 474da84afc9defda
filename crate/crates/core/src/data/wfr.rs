//! WFR1 container.
//!
//! ```text
//! 0..4     b"WFR1"
//! 4..8     header length, u32 LE
//! 8..8+n   UTF-8 JSON header {version, dims, latitudes, channel_meta, step_hours, splits}
//! ...      payload, row-major f32 LE snapshots
//! last 4   CRC32 of the payload, u32 LE
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChannelMeta, DatasetBundle, Splits};
use crate::error::{arg_err, FormatError, Result};
use crate::field::Field;

pub const WFR_MAGIC: &[u8; 4] = b"WFR1";
pub const WFR_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dims: [usize; 4],
    latitudes: Vec<f64>,
    channel_meta: Vec<ChannelMeta>,
    step_hours: f64,
    splits: Splits,
}

fn truncated(expected: usize, actual: usize) -> crate::Error {
    FormatError::Truncated { expected, actual }.into()
}

/// Serializes a physical-unit bundle. Normalized bundles are rejected
/// because their values are not representable at storage precision.
pub fn to_wfr_bytes(b: &DatasetBundle) -> Result<Vec<u8>> {
    if b.is_normalized() {
        return arg_err("denormalize a bundle before saving it");
    }
    let header = serde_json::to_vec(&Header {
        version: WFR_VERSION,
        dims: b.dims(),
        latitudes: b.latitudes().to_vec(),
        channel_meta: b.channel_meta().to_vec(),
        step_hours: b.step_hours(),
        splits: b.splits(),
    })?;
    let mut payload = Vec::with_capacity(4 * b.snapshots().len());
    for &v in b.snapshots().data() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(WFR_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

pub fn from_wfr_bytes(bytes: &[u8]) -> Result<DatasetBundle> {
    if bytes.len() < 8 {
        return Err(truncated(8, bytes.len()));
    }
    if &bytes[..4] != WFR_MAGIC {
        return Err(FormatError::BadMagic {
            expected: "WFR1".into(),
            found: bytes[..4].to_vec(),
        }
        .into());
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let hend = 8 + hlen;
    if bytes.len() < hend {
        return Err(truncated(hend, bytes.len()));
    }
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes[8..hend]).map_err(|e| FormatError::Header(e.to_string()))?;
    let version = raw
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| FormatError::Header("missing version".into()))?;
    if version != u64::from(WFR_VERSION) {
        return Err(FormatError::VersionMismatch {
            expected: WFR_VERSION,
            found: version.min(u64::from(u32::MAX)) as u32,
        }
        .into());
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| FormatError::Header(e.to_string()))?;
    let count: usize = header.dims.iter().product();
    let pend = hend + 4 * count;
    let expected = pend + 4;
    if bytes.len() < expected {
        return Err(truncated(expected, bytes.len()));
    }
    if bytes.len() > expected {
        return Err(FormatError::Header(format!("{} trailing bytes", bytes.len() - expected)).into());
    }
    let payload = &bytes[hend..pend];
    let stored = u32::from_le_bytes(bytes[pend..expected].try_into().unwrap());
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(FormatError::Checksum {
            expected: stored,
            actual,
        }
        .into());
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let snapshots = Field::new(header.dims.to_vec(), data)?;
    DatasetBundle::from_parts(
        snapshots,
        header.latitudes,
        header.channel_meta,
        header.step_hours,
        header.splits,
    )
    .map_err(|e| FormatError::Header(e.to_string()).into())
}

pub fn save_wfr(b: &DatasetBundle, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_wfr_bytes(b)?)?;
    Ok(())
}

pub fn load_wfr(path: impl AsRef<Path>) -> Result<DatasetBundle> {
    from_wfr_bytes(&std::fs::read(path)?)
}
