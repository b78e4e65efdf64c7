//! Model checkpoint file.
//!
//! Layout: an 8-byte little-endian `u64` giving the header length, the JSON
//! header itself, then every parameter value as little-endian `f64`, in
//! header order. The header carries the architecture and a name → offset
//! table (offsets and lengths counted in values, not bytes).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{ArchitectureConfig, Model};

pub const FORMAT: &str = "wjmmd-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub arch: ArchitectureConfig,
    pub params: Vec<ParamEntry>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut params = Vec::with_capacity(model.store().len());
    let mut offset = 0;
    for (name, t) in model.store().iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let header = CheckpointHeader {
        format: FORMAT.to_string(),
        arch: model.config().clone(),
        params,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + offset * 8);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.store().iter() {
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .ok_or_else(|| bad("truncated header length"))?
        .try_into()
        .expect("eight bytes");
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| bad("header length overflow"))?;
    let body_start = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..body_start])?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format '{}'", header.format)));
    }
    let body = &bytes[body_start..];
    if !body.len().is_multiple_of(8) {
        return Err(bad("parameter block is not a whole number of f64 values"));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();
    let mut store = ParameterStore::new();
    for p in &header.params {
        let slice = values
            .get(p.offset..p.offset + p.len)
            .ok_or_else(|| Error::Checkpoint(format!("parameter '{}' out of bounds", p.name)))?;
        store.insert(p.name.clone(), Tensor::new(p.shape.clone(), slice.to_vec())?)?;
    }
    let model = Model::from_parts(header.arch, store)?;
    // A store that differs from a fresh build in names or shapes is rejected.
    let mut probe = rand::rngs::mock::StepRng::new(0, 0);
    let reference = Model::build(model.config().clone(), &mut probe)?;
    let same_layout = reference.store().len() == model.store().len()
        && reference
            .store()
            .iter()
            .all(|(n, t)| model.store().get(n).map(|m| m.shape()) == Some(t.shape()));
    if !same_layout {
        return Err(bad("parameter table does not match the architecture"));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn round_trip_preserves_parameters() {
        let cfg = ArchitectureConfig::new(Variant::Small, 4);
        let m = Model::build(cfg, &mut stream_rng(3, Stream::Init, 0)).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.store(), m.store());
        assert_eq!(back.config(), m.config());
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_file_rejected() {
        let cfg = ArchitectureConfig::new(Variant::Small, 2);
        let m = Model::build(cfg, &mut stream_rng(3, Stream::Init, 0)).unwrap();
        let bytes = to_bytes(&m).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(from_bytes(&bytes[..4]).is_err());
    }
}
