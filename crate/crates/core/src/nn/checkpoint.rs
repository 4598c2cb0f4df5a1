//! `DCA1` binary checkpoints.
//!
//! Layout: the magic bytes `DCA1`, a little-endian `u32` metadata length, the
//! JSON metadata blob, then every parameter as a little-endian `f64` in layer
//! order.

use serde::{Deserialize, Serialize};

use super::{param_count, Activation, Mlp};
use crate::diffusion::ScheduleSpec;
use crate::error::{DcaError, Result};

pub const MAGIC: &[u8; 4] = b"DCA1";
pub const FORMAT_VERSION: u32 = 1;
/// Metadata blobs larger than this are rejected before parsing.
pub const MAX_METADATA_LEN: u32 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Score,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: ModelKind,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub embed_width: Option<usize>,
    pub schedule: Option<ScheduleSpec>,
    pub seed: u64,
    pub num_classes: Option<usize>,
    pub frozen: Option<bool>,
    pub epochs: Option<usize>,
    pub val_accuracy: Option<f64>,
    pub config_hash: Option<String>,
}

impl CheckpointMeta {
    pub fn for_net(kind: ModelKind, net: &Mlp, seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind,
            widths: net.widths().to_vec(),
            activation: net.activation(),
            embed_width: net.time_embed(),
            schedule: None,
            seed,
            num_classes: None,
            frozen: None,
            epochs: None,
            val_accuracy: None,
            config_hash: None,
        }
    }
}

pub fn encode(meta: &CheckpointMeta, params: &[f64]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)
        .map_err(|e| DcaError::Checkpoint(format!("metadata serialization: {e}")))?;
    let len = u32::try_from(json.len())
        .ok()
        .filter(|l| *l <= MAX_METADATA_LEN)
        .ok_or_else(|| DcaError::Checkpoint("metadata too large".into()))?;
    let mut out = Vec::with_capacity(8 + json.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

/// Parses and validates a checkpoint. Never panics on arbitrary input.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointMeta, Vec<f64>)> {
    let bad = |m: &str| DcaError::Checkpoint(m.to_string());
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing DCA1 magic"));
    }
    let len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if len > MAX_METADATA_LEN {
        return Err(bad("metadata length out of range"));
    }
    let end = 8 + len as usize;
    let json = bytes.get(8..end).ok_or_else(|| bad("truncated metadata"))?;
    // The version is checked first so older blobs report a version mismatch
    // rather than a schema error.
    let value: serde_json::Value =
        serde_json::from_slice(json).map_err(|e| DcaError::Checkpoint(format!("metadata: {e}")))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| bad("metadata lacks format_version"))?;
    if version != FORMAT_VERSION as u64 {
        return Err(DcaError::CheckpointVersion {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    let meta: CheckpointMeta =
        serde_json::from_value(value).map_err(|e| DcaError::Checkpoint(format!("metadata: {e}")))?;
    if meta.widths.len() < 2 || meta.widths.contains(&0) {
        return Err(bad("invalid layer widths"));
    }
    let n = param_count(&meta.widths).ok_or_else(|| bad("parameter count overflows"))?;
    let body = &bytes[end..];
    if Some(body.len()) != n.checked_mul(8) {
        return Err(DcaError::Checkpoint(format!(
            "expected {n} parameters ({} bytes), found {} bytes",
            n.saturating_mul(8),
            body.len()
        )));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((meta, params))
}

/// Rebuilds the network described by a decoded checkpoint.
pub fn to_mlp(meta: &CheckpointMeta, params: Vec<f64>) -> Result<Mlp> {
    Mlp::from_parts(meta.widths.clone(), meta.activation, meta.embed_width, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (CheckpointMeta, Mlp) {
        let net = Mlp::new(2, &[3], 2, Activation::Silu, None, 5).unwrap();
        let mut meta = CheckpointMeta::for_net(ModelKind::Classifier, &net, 5);
        meta.num_classes = Some(2);
        meta.frozen = Some(true);
        (meta, net)
    }

    #[test]
    fn layout_is_bit_exact() {
        let (meta, net) = sample();
        let bytes = encode(&meta, net.params()).unwrap();
        assert_eq!(&bytes[..4], b"DCA1");
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let json: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
        assert_eq!(json["widths"], serde_json::json!([2, 3, 2]));
        let first = f64::from_le_bytes(bytes[8 + len..16 + len].try_into().unwrap());
        assert_eq!(first, net.params()[0]);
        assert_eq!(bytes.len(), 8 + len + 8 * net.num_params());
        let (m2, p2) = decode(&bytes).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(to_mlp(&m2, p2).unwrap(), net);
    }

    #[test]
    fn rejects_truncation_and_garbage() {
        let (meta, net) = sample();
        let bytes = encode(&meta, net.params()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"DCA2\0\0\0\0").is_err());
        assert!(decode(&[]).is_err());
        let mut huge = b"DCA1".to_vec();
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode(&huge).is_err());
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let (mut meta, net) = sample();
        meta.format_version = 7;
        let bytes = encode(&meta, net.params()).unwrap();
        assert!(matches!(decode(&bytes), Err(DcaError::CheckpointVersion { found: 7, expected: 1 })));
    }
}
