//! Checkpoint directory: `manifest.json` plus one little-endian blob per
//! tensor (`<name>.bin`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{Backbone, ReferenceNet, TensorInfo, WidthPreset};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stack::{read_json, write_json};

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub architecture: String,
    pub preset: WidthPreset,
    pub dtype: String,
    pub parameters: Vec<TensorInfo>,
    pub buffers: Vec<TensorInfo>,
    /// Echo of the training configuration that produced the weights.
    pub train_config: serde_json::Value,
}

fn blob_name(name: &str) -> String {
    format!("{name}.bin")
}

fn write_blob<T: Scalar>(dir: &Path, name: &str, values: &[T]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * T::BYTES);
    for &v in values {
        v.write_le(&mut bytes);
    }
    let path = dir.join(blob_name(name));
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

fn read_blob<T: Scalar>(dir: &Path, info: &TensorInfo, out: &mut [T]) -> Result<()> {
    let path = dir.join(blob_name(&info.name));
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = info.shape.iter().product::<usize>();
    if expected != out.len() || bytes.len() != expected * T::BYTES {
        return Err(Error::Corruption {
            path,
            reason: format!(
                "expected {} values of {}, found {} bytes",
                out.len(),
                T::DTYPE,
                bytes.len()
            ),
        });
    }
    for (o, chunk) in out.iter_mut().zip(bytes.chunks_exact(T::BYTES)) {
        *o = T::read_le(chunk);
    }
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(
    net: &ReferenceNet<T>,
    train_config: serde_json::Value,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = net.parameters();
    for (info, values) in params.iter().zip(net.params()) {
        write_blob(dir, &info.name, values)?;
    }
    let buffers = net.buffers();
    for (info, values) in &buffers {
        write_blob(dir, &info.name, values)?;
    }
    let manifest = CheckpointManifest {
        architecture: "reference_net".into(),
        preset: net.preset,
        dtype: T::DTYPE.into(),
        parameters: params,
        buffers: buffers.into_iter().map(|(i, _)| i).collect(),
        train_config,
    };
    write_json(&dir.join(CHECKPOINT_MANIFEST), &manifest)
}

pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<(ReferenceNet<T>, CheckpointManifest)> {
    let dir = dir.as_ref();
    let manifest: CheckpointManifest = read_json(&dir.join(CHECKPOINT_MANIFEST))?;
    let bad = |reason: String| Error::Format {
        path: dir.join(CHECKPOINT_MANIFEST),
        reason,
    };
    if manifest.architecture != "reference_net" {
        return Err(bad(format!("unknown architecture {:?}", manifest.architecture)));
    }
    if manifest.dtype != T::DTYPE {
        return Err(bad(format!(
            "checkpoint dtype {} cannot load as {}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let mut net = ReferenceNet::<T>::new(manifest.preset, 0);
    if net.parameters() != manifest.parameters {
        return Err(bad("parameter list does not match the architecture".into()));
    }
    let buffer_infos: Vec<TensorInfo> = net.buffers().into_iter().map(|(i, _)| i).collect();
    if buffer_infos != manifest.buffers {
        return Err(bad("buffer list does not match the architecture".into()));
    }
    for (info, slot) in manifest.parameters.iter().zip(net.params_mut()) {
        read_blob(dir, info, slot)?;
    }
    for (info, slot) in manifest.buffers.iter().zip(net.buffers_mut()) {
        read_blob(dir, info, slot)?;
    }
    Ok((net, manifest))
}
