//! Checkpoint directory: `manifest.json` plus `params.bin`, the parameters
//! concatenated in manifest order as little-endian floats.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{params, Encoder, EncoderConfig, Group};
use crate::error::{Error, Result};
use crate::tensor::{DType, Mat, Real};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT_TAG: &str = "emvi-checkpoint";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub group: Group,
    pub shape: [usize; 2],
    /// Byte offset into `params.bin`.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: DType,
    pub seed: u64,
    pub config: EncoderConfig,
    pub config_hash: String,
    /// Free-form run metadata (trunk, stage, run config hash, ...).
    pub meta: BTreeMap<String, String>,
    pub params: Vec<ManifestEntry>,
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<S: Serialize>(value: &S) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint<T: Real>(
    enc: &Encoder<T>,
    meta: &BTreeMap<String, String>,
    dir: &Path,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(enc.n_scalars() * T::DTYPE.size_of());
    let mut entries = Vec::with_capacity(enc.params.len());
    for (spec, p) in enc.specs.iter().zip(&enc.params) {
        entries.push(ManifestEntry {
            name: spec.name.clone(),
            group: spec.group,
            shape: [p.rows, p.cols],
            offset: bytes.len(),
        });
        for &v in &p.data {
            v.write_le(&mut bytes);
        }
    }
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        version: 1,
        dtype: T::DTYPE,
        seed: enc.seed,
        config: enc.cfg.clone(),
        config_hash: config_hash(&enc.cfg),
        meta: meta.clone(),
        params: entries,
    };
    let mpath = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    text.push(b'\n');
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let ppath = dir.join(PARAMS_FILE);
    fs::write(&ppath, bytes).map_err(|e| Error::io(&ppath, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint manifest", mpath.display())));
    }
    Ok(manifest)
}

pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<(Encoder<T>, Manifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {} parameters, expected {}",
            manifest.dtype.as_str(),
            T::DTYPE.as_str()
        )));
    }
    if manifest.config_hash != config_hash(&manifest.config) {
        return Err(Error::Checkpoint("config hash does not match manifest config".into()));
    }
    let (specs, ids) = params::layout(&manifest.config);
    if specs.len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, config implies {}",
            manifest.params.len(),
            specs.len()
        )));
    }
    let ppath = dir.join(PARAMS_FILE);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let width = T::DTYPE.size_of();
    let mut out = Vec::with_capacity(specs.len());
    for (spec, entry) in specs.iter().zip(&manifest.params) {
        if spec.name != entry.name || [spec.rows, spec.cols] != entry.shape {
            return Err(Error::Checkpoint(format!(
                "parameter {} does not match the config layout",
                entry.name
            )));
        }
        let n = spec.rows * spec.cols;
        let end = entry.offset + n * width;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!("{} is truncated", ppath.display())));
        }
        let data = bytes[entry.offset..end].chunks_exact(width).map(T::read_le).collect();
        out.push(Mat::from_vec(spec.rows, spec.cols, data));
    }
    let enc = Encoder {
        cfg: manifest.config.clone(),
        specs,
        ids,
        params: out,
        seed: manifest.seed,
    };
    Ok((enc, manifest))
}
