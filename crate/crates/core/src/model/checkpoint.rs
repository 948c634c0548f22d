//! Checkpoint directories: `manifest.json` describing every tensor and
//! `tensors.bin` holding their raw little-endian values back to back.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

use super::{param_specs, CatBertModel, ModelConfig, Provenance, SurgeryRecord};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    /// Byte offset within `file`.
    pub offset: u64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surgery: Option<SurgeryRecord>,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

pub fn save_checkpoint<T: Scalar>(model: &CatBertModel<T>, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob_path = dir.join(BLOB_FILE);
    let file = File::create(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut out = BufWriter::new(file);
    let mut tensors = Vec::with_capacity(model.params().len());
    let mut offset = 0u64;
    let mut buf = Vec::new();
    for (p, prov) in model.params().iter().zip(model.provenance()) {
        buf.clear();
        for &v in p.value.data() {
            v.write_le(&mut buf);
        }
        out.write_all(&buf).map_err(|e| Error::io(&blob_path, e))?;
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            file: BLOB_FILE.to_string(),
            offset,
            provenance: prov.clone(),
        });
        offset += buf.len() as u64;
    }
    out.flush().map_err(|e| Error::io(&blob_path, e))?;

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        surgery: model.surgery().cloned(),
        tensors,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn dtype_width(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "f64" => Some(8),
        _ => None,
    }
}

fn decode<T: Scalar>(dtype: &str, bytes: &[u8]) -> Vec<T> {
    match dtype {
        "f32" => bytes.chunks_exact(4).map(|c| T::lit(<f32 as Scalar>::read_le(c) as f64)).collect(),
        _ => bytes.chunks_exact(8).map(|c| T::lit(<f64 as Scalar>::read_le(c))).collect(),
    }
}

/// Loads a checkpoint, validating the whole manifest against its config
/// before any tensor data is read.
pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<CatBertModel<T>> {
    let dir = dir.as_ref();
    let manifest = Manifest::read(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    manifest.config.validate()?;
    let specs = param_specs(&manifest.config);

    let mut entries: HashMap<&str, &TensorEntry> = HashMap::new();
    for e in &manifest.tensors {
        if entries.insert(&e.name, e).is_some() {
            return Err(Error::Checkpoint(format!("tensor {} listed twice", e.name)));
        }
    }
    let mut sizes: HashMap<&str, u64> = HashMap::new();
    let mut plan = Vec::with_capacity(specs.len());
    for spec in &specs {
        let e = entries
            .remove(spec.name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", spec.name)))?;
        if e.shape != spec.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, config requires {:?}",
                e.name, e.shape, spec.shape
            )));
        }
        let width = dtype_width(&e.dtype)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} has unsupported dtype {}", e.name, e.dtype)))?;
        if e.file.is_empty() || e.file.contains(['/', '\\']) || e.file.starts_with('.') {
            return Err(Error::Checkpoint(format!("tensor {} names invalid file {:?}", e.name, e.file)));
        }
        if !sizes.contains_key(e.file.as_str()) {
            let path = dir.join(&e.file);
            let len = std::fs::metadata(&path).map_err(|err| Error::io(&path, err))?.len();
            sizes.insert(&e.file, len);
        }
        let nbytes = (spec.shape.iter().product::<usize>() * width) as u64;
        if e.offset + nbytes > sizes[e.file.as_str()] {
            return Err(Error::Checkpoint(format!(
                "tensor {} is truncated: needs bytes {}..{} of {} ({} available)",
                e.name,
                e.offset,
                e.offset + nbytes,
                e.file,
                sizes[e.file.as_str()]
            )));
        }
        plan.push((e, nbytes));
    }
    if let Some(extra) = entries.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra} not in config")));
    }

    let mut files: HashMap<&str, File> = HashMap::new();
    let mut params = ParamStore::new();
    let mut provenance = Vec::with_capacity(plan.len());
    let mut buf = Vec::new();
    for (e, nbytes) in plan {
        let path = dir.join(&e.file);
        if !files.contains_key(e.file.as_str()) {
            files.insert(&e.file, File::open(&path).map_err(|err| Error::io(&path, err))?);
        }
        let f = files.get_mut(e.file.as_str()).expect("opened above");
        buf.resize(nbytes as usize, 0);
        f.seek(SeekFrom::Start(e.offset))
            .and_then(|_| f.read_exact(&mut buf))
            .map_err(|err| Error::Checkpoint(format!("reading tensor {}: {err}", e.name)))?;
        let value = Tensor::new(e.shape.clone(), decode(&e.dtype, &buf))?;
        params.push(e.name.clone(), value)?;
        provenance.push(e.provenance.clone());
    }
    CatBertModel::from_parts(manifest.config, params, provenance, manifest.surgery)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> CatBertModel<f32> {
        CatBertModel::init_random(&ModelConfig::tiny(40), 4).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save_checkpoint(&m, dir.path()).unwrap();
        let back: CatBertModel<f32> = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, m);

        let again = tempfile::tempdir().unwrap();
        save_checkpoint(&back, again.path()).unwrap();
        for f in [BLOB_FILE, MANIFEST_FILE] {
            assert_eq!(
                std::fs::read(dir.path().join(f)).unwrap(),
                std::fs::read(again.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn truncated_blob_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path()).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let len = std::fs::metadata(&blob).unwrap().len();
        let f = std::fs::OpenOptions::new().write(true).open(&blob).unwrap();
        f.set_len(len - 10).unwrap();
        let err = load_checkpoint::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("tensor classifier.output.weight is truncated"), "{err}");
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path()).unwrap();
        let mut manifest = Manifest::read(dir.path()).unwrap();
        manifest.tensors[4].shape = vec![3, 3];
        std::fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        let err = load_checkpoint::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains(&manifest.tensors[4].name) && err.contains("shape"), "{err}");
    }

    #[test]
    fn missing_tensor_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path()).unwrap();
        let original = Manifest::read(dir.path()).unwrap();

        let mut m = original.clone();
        let gone = m.tensors.remove(2).name;
        std::fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        let err = load_checkpoint::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("missing") && err.contains(&gone), "{err}");

        let mut m = original;
        m.format_version = 99;
        std::fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        let err = load_checkpoint::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn f32_checkpoint_loads_as_f64() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save_checkpoint(&m, dir.path()).unwrap();
        let wide: CatBertModel<f64> = load_checkpoint(dir.path()).unwrap();
        assert_eq!(wide.cast::<f32>(), m);
    }
}
