//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `FCVADCKP`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header (model config, training
//! step, tensor table) and then every tensor as little-endian `f32`,
//! parameters first, buffers after, in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, Predictor};
use crate::error::{Error, Result};
use crate::nn::{Param, ParamStore};

pub const MAGIC: &[u8; 8] = b"FCVADCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    step: u64,
    crate_version: String,
    params: Vec<TensorEntry>,
    buffers: Vec<TensorEntry>,
}

/// A model restored from disk together with its training step.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Predictor,
    pub step: u64,
}

pub fn to_bytes(model: &Predictor, step: u64) -> Result<Vec<u8>> {
    let store = model.store();
    let entries = |ps: &[Param]| ps.iter().map(|p| TensorEntry { name: p.name.clone(), shape: p.shape.clone() }).collect();
    let header = Header {
        model: model.config().clone(),
        step,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        params: entries(store.params()),
        buffers: entries(store.buffers()),
    };
    let json = serde_json::to_vec(&header)?;
    let n: usize = store.params().iter().chain(store.buffers()).map(|p| p.data.len()).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 4 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in store.params().iter().chain(store.buffers()) {
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a checkpoint. When `expected` is given, the stored model config
/// must match it exactly.
pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (expected {FORMAT_VERSION})")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if let Some(exp) = expected {
        if *exp != header.model {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with a different model config:\n  checkpoint: {}\n  requested:  {}",
                serde_json::to_string(&header.model)?,
                serde_json::to_string(exp)?
            )));
        }
    }
    let mut data = &bytes[20 + hlen..];
    let mut read = |entries: &[TensorEntry]| -> Result<Vec<Param>> {
        entries
            .iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                if data.len() < 4 * n {
                    return Err(Error::Checkpoint(format!("tensor `{}` is truncated", e.name)));
                }
                let (head, tail) = data.split_at(4 * n);
                data = tail;
                let values = head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                Ok(Param { name: e.name.clone(), shape: e.shape.clone(), data: values })
            })
            .collect()
    };
    let params = read(&header.params)?;
    let buffers = read(&header.buffers)?;
    if !data.is_empty() {
        return Err(bad("trailing bytes after the last tensor"));
    }
    let mut model = Predictor::new(&header.model, 0).map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;
    model.store_mut().load_from(&ParamStore::from_parts(params, buffers))?;
    Ok(Checkpoint { model, step: header.step })
}

pub fn save(path: &Path, model: &Predictor, step: u64) -> Result<()> {
    let bytes = to_bytes(model, step)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny() -> ModelConfig {
        ModelConfig { t: 2, c_in: 1, frame_size: 8, channel_plan: vec![2, 3, 4, 5], ..ModelConfig::default() }
    }

    #[test]
    fn round_trip_preserves_predictions() {
        let mut model = Predictor::new(&tiny(), 7).unwrap();
        model.store_mut().buffers_mut()[0].data[0] = 0.25;
        let bytes = to_bytes(&model, 42).unwrap();
        let back = from_bytes(&bytes, Some(&tiny())).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.model.store(), model.store());
        let x = Tensor::from_vec([1, 2, 8, 8], (0..128).map(|i| (i as f32 * 0.1).sin()).collect()).unwrap();
        assert_eq!(back.model.predict(x.clone()).unwrap(), model.predict(x).unwrap());
    }

    #[test]
    fn mismatches_fail_loudly() {
        let model = Predictor::new(&tiny(), 7).unwrap();
        let bytes = to_bytes(&model, 1).unwrap();
        let other = ModelConfig { use_ega: false, ..tiny() };
        assert!(matches!(from_bytes(&bytes, Some(&other)), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3], None), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(b"garbage bytes here, long enough", None), Err(Error::Checkpoint(_))));
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(matches!(from_bytes(&wrong_version, None), Err(Error::Checkpoint(_))));
    }
}
