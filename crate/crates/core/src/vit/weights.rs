//! Weight files: `<prefix>.manifest.json` lists every parameter with its
//! shape and offset into `<prefix>.tnsr`, a single rank-1 TNSR blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ViTConfig, ViTModel};
use crate::error::{Error, Result};
use crate::tensor::{read_tnsr, write_tnsr, Tensor};

const FORMAT: &str = "wegpipe-vit";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ViTConfig,
    blob: String,
    params: Vec<ParamEntry>,
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".manifest.json")
}

pub fn blob_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".tnsr")
}

/// Writes `<prefix>.manifest.json` and `<prefix>.tnsr`.
pub fn save_weights(model: &ViTModel, prefix: impl AsRef<Path>) -> Result<()> {
    let prefix = prefix.as_ref();
    let blob = blob_path(prefix);
    let mut params = Vec::new();
    let mut data = Vec::with_capacity(model.num_params());
    for ((name, shape), t) in ViTModel::param_layout(&model.config)
        .into_iter()
        .zip(model.params())
    {
        params.push(ParamEntry {
            name,
            shape,
            offset: data.len(),
        });
        data.extend_from_slice(t.data());
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        config: model.config.clone(),
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        params,
    };
    write_tnsr(&blob, &Tensor::from_vec(data))?;
    let path = manifest_path(prefix);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::file(&path, e))
}

/// Loads a model written by [`save_weights`]. Nothing is returned unless
/// every parameter is present with the shape its config requires.
pub fn load_weights(prefix: impl AsRef<Path>) -> Result<ViTModel> {
    let prefix = prefix.as_ref();
    let path = manifest_path(prefix);
    let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(Error::Format(format!(
            "{}: unsupported weight format {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    manifest.config.validate()?;
    let blob_file = path
        .parent()
        .map_or_else(|| PathBuf::from(&manifest.blob), |d| d.join(&manifest.blob));
    let blob = read_tnsr(&blob_file)?;
    if blob.rank() != 1 {
        return Err(Error::Format("weight blob must be rank 1".into()));
    }
    let layout = ViTModel::param_layout(&manifest.config);
    if layout.len() != manifest.params.len() {
        return Err(Error::Format(format!(
            "manifest lists {} parameters, config requires {}",
            manifest.params.len(),
            layout.len()
        )));
    }
    let mut params = Vec::with_capacity(layout.len());
    for ((name, shape), entry) in layout.iter().zip(&manifest.params) {
        if &entry.name != name {
            return Err(Error::Format(format!(
                "expected parameter {name}, manifest has {}",
                entry.name
            )));
        }
        if &entry.shape != shape {
            return Err(Error::Format(format!(
                "parameter {name} declared with shape {:?}, config requires {shape:?}",
                entry.shape
            )));
        }
        let numel: usize = shape.iter().product();
        let end = entry.offset.checked_add(numel).filter(|&e| e <= blob.numel());
        let Some(end) = end else {
            return Err(Error::Format(format!(
                "parameter {name} extends past the end of the weight blob"
            )));
        };
        params.push(Tensor::new(
            shape.clone(),
            blob.data()[entry.offset..end].to_vec(),
        )?);
    }
    ViTModel::from_params(manifest.config, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            num_heads: 2,
            num_blocks: 1,
            mlp_ratio: 2,
            ..ViTConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("model");
        let model = ViTModel::new(tiny(), 11).unwrap();
        save_weights(&model, &prefix).unwrap();
        assert!(dir.path().join("model.manifest.json").exists());
        assert!(dir.path().join("model.tnsr").exists());
        assert_eq!(load_weights(&prefix).unwrap(), model);
    }

    #[test]
    fn truncated_blob_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("m");
        save_weights(&ViTModel::new(tiny(), 1).unwrap(), &prefix).unwrap();
        let blob = blob_path(&prefix);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 16]).unwrap();
        assert!(matches!(load_weights(&prefix), Err(Error::Format(_))));
    }

    #[test]
    fn edited_shape_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("m");
        save_weights(&ViTModel::new(tiny(), 1).unwrap(), &prefix).unwrap();
        let path = manifest_path(&prefix);
        let mut manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        manifest["params"][4]["shape"] = serde_json::json!([9]);
        fs::write(&path, manifest.to_string()).unwrap();
        let err = load_weights(&prefix).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("blocks.0.norm1.weight"), "{err}");
    }

    #[test]
    fn corrupt_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("m");
        save_weights(&ViTModel::new(tiny(), 1).unwrap(), &prefix).unwrap();
        fs::write(manifest_path(&prefix), "{ not json").unwrap();
        assert!(matches!(load_weights(&prefix), Err(Error::Format(_))));
    }
}
