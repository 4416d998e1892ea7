//! Binary model checkpoints.
//!
//! Layout: `b"MSCP"`, format version (u32 LE), header length (u32 LE), a JSON
//! header, then little-endian f32 payload: every parameter in manifest order
//! followed by each batch-norm layer's running mean and variance.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelSpec, ModelState, ParamTensor, ParamVector, RunningStats};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"MSCP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    NotACheckpoint,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("malformed header: {0}")]
    Header(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub spec: ModelSpec,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    pub train: Option<TrainConfig>,
    pub params: Vec<ManifestEntry>,
    /// Each entry covers `mean` then `var`, `shape[0]` values each.
    pub running: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub train: Option<TrainConfig>,
}

pub fn to_bytes(state: &ModelState, train: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut params = Vec::new();
    for e in state.params.entries() {
        params.push(ManifestEntry {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            offset,
        });
        offset += 4 * e.value.numel();
    }
    let mut running = Vec::new();
    for r in &state.running {
        if r.mean.len() != r.var.len() {
            return Err(Error::invalid(format!("running stats `{}` have unequal lengths", r.name)));
        }
        running.push(ManifestEntry {
            name: r.name.clone(),
            shape: vec![r.mean.len()],
            offset,
        });
        offset += 8 * r.mean.len();
    }
    let header = Header {
        spec: state.spec.clone(),
        epoch: state.epoch,
        metrics: state.metrics.clone(),
        train: train.copied(),
        params,
        running,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let floats = state
        .params
        .iter_values()
        .chain(state.running.iter().flat_map(|r| r.mean.iter().chain(&r.var).copied()));
    for v in floats {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> Option<u32> {
    Some(u32::from_le_bytes(bytes.get(at..at + 4)?.try_into().ok()?))
}

fn floats(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.get(..4) != Some(MAGIC) {
        return Err(CheckpointError::NotACheckpoint);
    }
    let version = u32_at(bytes, 4).ok_or(CheckpointError::Header("truncated preamble".into()))?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = u32_at(bytes, 8).ok_or(CheckpointError::Header("truncated preamble".into()))? as usize;
    let hbytes = bytes
        .get(12..12 + hlen)
        .ok_or(CheckpointError::Header("truncated header".into()))?;
    let header: Header = serde_json::from_slice(hbytes).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &bytes[12 + hlen..];

    let layout = header.spec.layout();
    if layout.len() != header.params.len() {
        return Err(CheckpointError::ManifestMismatch(format!(
            "spec has {} parameter tensors, manifest lists {}",
            layout.len(),
            header.params.len()
        )));
    }
    let mut expected = 0;
    for ((name, shape, _), m) in layout.iter().zip(&header.params) {
        if *name != m.name || *shape != m.shape || m.offset != expected {
            return Err(CheckpointError::ManifestMismatch(format!(
                "entry `{}` {:?} at {} does not match `{}` {:?} at {}",
                m.name, m.shape, m.offset, name, shape, expected
            )));
        }
        expected += 4 * shape.iter().product::<usize>();
    }
    let bn = header.spec.batch_norm_layers();
    if bn.len() != header.running.len() {
        return Err(CheckpointError::ManifestMismatch(format!(
            "spec has {} batch-norm layers, manifest lists {}",
            bn.len(),
            header.running.len()
        )));
    }
    for ((name, ch), m) in bn.iter().zip(&header.running) {
        if *name != m.name || m.shape != [*ch] || m.offset != expected {
            return Err(CheckpointError::ManifestMismatch(format!(
                "running stats `{}` {:?} do not match `{}` [{}]",
                m.name, m.shape, name, ch
            )));
        }
        expected += 8 * ch;
    }
    if payload.len() != expected {
        return Err(CheckpointError::PayloadLength {
            expected,
            found: payload.len(),
        });
    }

    let mut entries = Vec::with_capacity(layout.len());
    for ((name, shape, kind), m) in layout.into_iter().zip(&header.params) {
        let n: usize = shape.iter().product();
        let data = floats(&payload[m.offset..m.offset + 4 * n]);
        let value = Tensor::new(shape, data).map_err(|e| CheckpointError::ManifestMismatch(e.to_string()))?;
        entries.push(ParamTensor { name, kind, value });
    }
    let running = header
        .running
        .iter()
        .map(|m| {
            let c = m.shape[0];
            let all = floats(&payload[m.offset..m.offset + 8 * c]);
            RunningStats {
                name: m.name.clone(),
                mean: all[..c].to_vec(),
                var: all[c..].to_vec(),
            }
        })
        .collect();
    Ok(Checkpoint {
        state: ModelState {
            spec: header.spec,
            params: ParamVector::new(entries),
            running,
            epoch: header.epoch,
            metrics: header.metrics,
        },
        train: header.train,
    })
}

pub fn save_checkpoint(path: &Path, state: &ModelState, train: Option<&TrainConfig>) -> Result<()> {
    let bytes = to_bytes(state, train)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(from_bytes(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_model;
    use crate::optim::OptimConfig;

    fn state() -> ModelState {
        let mut s = build_model(&ModelSpec::mini10(10, 16), 7).unwrap();
        s.running[1].mean[3] = 0.25;
        s.metrics.insert("dev_accuracy".into(), 0.8125);
        s.epoch = 4;
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = state();
        let tc = TrainConfig::new(OptimConfig::adam(1e-3), 32, 42);
        let bytes = to_bytes(&s, Some(&tc)).unwrap();
        let ck = from_bytes(&bytes).unwrap();
        assert_eq!(ck.state, s);
        assert_eq!(ck.train, Some(tc));
        assert_eq!(to_bytes(&ck.state, ck.train.as_ref()).unwrap(), bytes);
    }

    #[test]
    fn corruptions_have_distinct_errors() {
        let bytes = to_bytes(&state(), None).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::NotACheckpoint)));
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 4]),
            Err(CheckpointError::PayloadLength { .. })
        ));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(from_bytes(&v), Err(CheckpointError::VersionMismatch { found: 9, .. })));
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let at = text.find("block1.conv1.weight").unwrap();
        let mut m = bytes.clone();
        m[at + 6] = b'9';
        assert!(matches!(from_bytes(&m), Err(CheckpointError::ManifestMismatch(_))));
        assert!(matches!(from_bytes(b"MS"), Err(CheckpointError::NotACheckpoint)));
    }
}
