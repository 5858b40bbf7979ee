//! Binary checkpoint: magic, version, JSON header, raw little-endian f64s.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Layout, Model, ModelConfig, ModelError, Normalizer, TensorSpec};

const MAGIC: &[u8; 8] = b"CSLACKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    normalizer: Normalizer,
    param_count: usize,
    layout: Vec<TensorSpec>,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        normalizer: model.normalizer.clone(),
        param_count: model.param_count(),
        layout: model.layout.tensors.clone(),
    })?;
    let mut buf = Vec::with_capacity(20 + header.len() + 8 * model.params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for p in &model.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(CheckpointError::from)?;
    let corrupt = |m: &str| ModelError::Checkpoint(CheckpointError::Corrupt(m.to_string()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..).ok_or_else(|| corrupt("truncated"))?;
    if body.len() < hlen {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(CheckpointError::from)?;
    let raw = &body[hlen..];
    if raw.len() != 8 * header.param_count {
        return Err(corrupt(&format!("expected {} parameters, found {} bytes", header.param_count, raw.len())));
    }
    if Layout::new(&header.config).tensors != header.layout {
        return Err(corrupt("layout does not match config"));
    }
    let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Model::from_parts(header.config, params, Some(header.normalizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Predictor};

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build_model(ModelConfig::default()).unwrap();
        m.normalizer.input_mean = vec![24.0, 22.5, 50.0];
        m.normalizer.target_std = vec![0.3, 1e-3, 7.0];
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.normalizer, m.normalizer);
        let lb = vec![vec![24.0, 22.0, 49.0]; 60];
        assert_eq!(back.predict(&lb).unwrap(), m.predict(&lb).unwrap());
    }

    #[test]
    fn rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(ModelConfig::default()).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&m, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(&path).is_err());
        fs::write(&path, b"nope").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::Checkpoint(CheckpointError::BadMagic))));
    }
}
