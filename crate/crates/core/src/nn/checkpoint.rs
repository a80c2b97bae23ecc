//! Checkpoint directories: `manifest.json` describing every tensor and
//! `params.bin` holding little-endian f32 values in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{structural, Error, Result};
use crate::nn::adam::AdamState;
use crate::nn::params::ParamStore;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub kind: String,
    pub step: u64,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact: String,
    pub tensors: Vec<TensorRecord>,
    pub optimizer: Option<OptimizerRecord>,
    /// Artifact-specific documents such as `model_config`.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// A checkpoint read back from disk.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub artifact: String,
    pub store: ParamStore,
    pub optimizer: Option<AdamState>,
    pub extra: Map<String, Value>,
}

impl Checkpoint {
    pub fn extra_field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .extra
            .get(key)
            .ok_or_else(|| structural!("checkpoint manifest lacks {key:?}"))?;
        serde_json::from_value(v.clone()).map_err(|e| structural!("checkpoint field {key:?}: {e}"))
    }

    pub fn expect_artifact(&self, artifact: &str) -> Result<()> {
        if self.artifact != artifact {
            return Err(structural!(
                "expected a {artifact:?} checkpoint, found {:?}",
                self.artifact
            ));
        }
        Ok(())
    }
}

fn push_tensor(bytes: &mut Vec<u8>, records: &mut Vec<TensorRecord>, name: String, shape: Vec<usize>, values: &[f64]) {
    let offset = bytes.len() as u64;
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    records.push(TensorRecord {
        name,
        shape,
        dtype: "f32".to_string(),
        byte_offset: offset,
        byte_len: bytes.len() as u64 - offset,
    });
}

/// Writes a checkpoint directory. Each file is written beside its final name
/// and renamed into place, so an interrupted save leaves the previous files.
pub fn save_checkpoint(
    dir: &Path,
    artifact: &str,
    store: &ParamStore,
    optimizer: Option<&AdamState>,
    extra: Map<String, Value>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(store.len() * 4);
    let mut tensors = Vec::new();
    for e in store.entries() {
        push_tensor(
            &mut bytes,
            &mut tensors,
            e.name.clone(),
            e.shape.clone(),
            &store.values()[e.offset..e.offset + e.len],
        );
    }
    let optimizer = optimizer.map(|st| {
        let mut records = Vec::new();
        for (prefix, buf) in [("adam.m", &st.m), ("adam.v", &st.v)] {
            for e in store.entries() {
                push_tensor(
                    &mut bytes,
                    &mut records,
                    format!("{prefix}/{}", e.name),
                    e.shape.clone(),
                    &buf[e.offset..e.offset + e.len],
                );
            }
        }
        OptimizerRecord {
            kind: "adam".to_string(),
            step: st.step,
            tensors: records,
        }
    });
    let manifest = Manifest {
        artifact: artifact.to_string(),
        tensors,
        optimizer,
        extra,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_replace(&dir.join(PARAMS_FILE), &bytes)?;
    write_replace(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(())
}

fn write_replace(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_tensor(bytes: &[u8], rec: &TensorRecord) -> Result<Vec<f64>> {
    if rec.dtype != "f32" {
        return Err(structural!("tensor {:?} has unsupported dtype {:?}", rec.name, rec.dtype));
    }
    let len: usize = rec.shape.iter().product();
    let (start, blen) = (rec.byte_offset as usize, rec.byte_len as usize);
    if blen != 4 * len || start + blen > bytes.len() {
        return Err(structural!("tensor {:?} byte range does not match its shape", rec.name));
    }
    Ok(bytes[start..start + blen]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&mpath, e))?;
    let bpath = dir.join(PARAMS_FILE);
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;

    let mut store = ParamStore::new();
    for rec in &manifest.tensors {
        let values = read_tensor(&bytes, rec)?;
        store.add(&rec.name, &rec.shape, values)?;
    }
    let optimizer = match &manifest.optimizer {
        None => None,
        Some(opt) => {
            let mut state = AdamState::for_store(&store);
            state.step = opt.step;
            for rec in &opt.tensors {
                let (which, name) = rec
                    .name
                    .split_once('/')
                    .ok_or_else(|| structural!("bad optimizer tensor name {:?}", rec.name))?;
                let id = store
                    .id(name)
                    .ok_or_else(|| structural!("optimizer state for unknown tensor {name:?}"))?;
                let e = store.entry(id);
                let values = read_tensor(&bytes, rec)?;
                let buf = match which {
                    "adam.m" => &mut state.m,
                    "adam.v" => &mut state.v,
                    other => return Err(structural!("unknown optimizer buffer {other:?}")),
                };
                buf[e.offset..e.offset + e.len].copy_from_slice(&values);
            }
            Some(state)
        }
    };
    Ok(Checkpoint {
        artifact: manifest.artifact,
        store,
        optimizer,
        extra: manifest.extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.add("a.weight", &[2, 2], vec![0.1, -3.25, 7.0, 1e-3]).unwrap();
        store.add("b", &[3], vec![1.0, 2.0, 3.0]).unwrap();
        store.quantize_f32();
        let mut opt = AdamState::for_store(&store);
        opt.step = 12;
        opt.m = vec![0.5, 0.25, -1.0, 2.0, 0.0, 0.125, 3.0];
        opt.v = vec![1.0; 7];
        let mut extra = Map::new();
        extra.insert("note".into(), Value::from("x"));
        save_checkpoint(dir.path(), "model", &store, Some(&opt), extra).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.artifact, "model");
        assert_eq!(back.store, store);
        assert_eq!(back.optimizer.unwrap(), opt);
        assert_eq!(back.extra["note"], "x");
        let manifest: Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(manifest["tensors"][1]["byte_offset"], 16);
        assert_eq!(manifest["tensors"][1]["byte_len"], 12);
        assert_eq!(manifest["tensors"][0]["dtype"], "f32");
    }

    #[test]
    fn truncated_params_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.add("a", &[4], vec![1.0; 4]).unwrap();
        save_checkpoint(dir.path(), "model", &store, None, Map::new()).unwrap();
        std::fs::write(dir.path().join(PARAMS_FILE), [0u8; 6]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Structural(_))));
    }
}
