//! Checkpoint format: a JSON manifest (config, config hash, seed,
//! vocabulary, parameter names and shapes) followed by the flat
//! parameter arrays as 64-bit little-endian floats, in manifest order.
//! Loads refuse checkpoints whose manifest disagrees with the
//! architecture implied by their config.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PostSelModel};
use crate::params::{Init, ParamSpec, ParamStore};

const MAGIC: &[u8; 8] = b"PSELCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    config_hash: String,
    seed: u64,
    vocab: Vec<String>,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &PostSelModel,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<()> {
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} entries but config says {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let manifest = Manifest {
        version: VERSION,
        config: model.config.clone(),
        config_hash: model.config.hash(),
        seed,
        vocab: vocab.tokens().to_vec(),
        params: model
            .params
            .iter()
            .map(|(name, p)| ParamEntry {
                name: name.to_string(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let manifest_json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let io_err = |e| Error::io(path.display().to_string(), e);
    file.write_all(MAGIC).map_err(io_err)?;
    file.write_all(&(manifest_json.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&manifest_json)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    for entry in &manifest.params {
        let param = model.params.get(&entry.name);
        buf.clear();
        buf.reserve(param.values.len() * 8);
        for v in &param.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Load a checkpoint, validating the manifest against the architecture
/// its config implies. Returns the model, vocabulary and training seed.
pub fn load_checkpoint(path: &Path) -> Result<(PostSelModel, Vocabulary, u64)> {
    let mut file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_json = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_json)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_json)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;

    if manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    if manifest.config_hash != manifest.config.hash() {
        return Err(Error::Checkpoint(
            "config hash does not match the stored config".into(),
        ));
    }
    if manifest.vocab.len() != manifest.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} entries but config says {}",
            manifest.vocab.len(),
            manifest.config.vocab_size
        )));
    }

    // diff the stored parameter set against what the config implies
    let expected_specs = manifest.config.param_specs();
    let expected: std::collections::BTreeMap<&str, &[usize]> = expected_specs
        .iter()
        .map(|s| (s.name.as_str(), s.shape.as_slice()))
        .collect();
    let stored: std::collections::BTreeMap<&str, &[usize]> = manifest
        .params
        .iter()
        .map(|e| (e.name.as_str(), e.shape.as_slice()))
        .collect();
    let mut diffs = Vec::new();
    for (name, shape) in &expected {
        match stored.get(name) {
            None => diffs.push(format!("missing parameter {name}")),
            Some(s) if s != shape => {
                diffs.push(format!("{name}: shape {s:?} vs expected {shape:?}"))
            }
            _ => {}
        }
    }
    for name in stored.keys() {
        if !expected.contains_key(name) {
            diffs.push(format!("unexpected parameter {name}"));
        }
    }
    if !diffs.is_empty() {
        return Err(Error::Checkpoint(format!(
            "parameter mismatch: {}",
            diffs.join("; ")
        )));
    }

    let zero_specs: Vec<ParamSpec> = manifest
        .params
        .iter()
        .map(|e| ParamSpec {
            name: e.name.clone(),
            shape: e.shape.clone(),
            init: Init::Zeros,
        })
        .collect();
    let mut params = ParamStore::init(&zero_specs, 0);
    let mut buf = Vec::new();
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        buf.resize(n * 8, 0);
        file.read_exact(&mut buf).map_err(|e| {
            Error::Checkpoint(format!(
                "{}: truncated values for {}: {e}",
                path.display(),
                entry.name
            ))
        })?;
        let values: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.get_mut(&entry.name).values = values;
    }
    let mut trailing = Vec::new();
    file.read_to_end(&mut trailing)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if !trailing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after parameter arrays",
            trailing.len()
        )));
    }

    let vocab = Vocabulary::from_tokens(manifest.vocab)?;
    Ok((
        PostSelModel::from_parts(manifest.config, params),
        vocab,
        manifest.seed,
    ))
}
