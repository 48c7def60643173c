//! Binary model checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian u64 manifest length, a JSON
//! manifest (format version, model config, parameter names and shapes in
//! order), then the raw parameter buffers as little-endian f64, concatenated
//! in manifest order. Round trips are bit exact.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::TrainRng;
use crate::transformer::{Model, ModelConfig};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"TLMCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    params: Vec<ManifestParam>,
}

#[derive(Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
}

pub fn save(path: &Path, cfg: &ModelConfig, params: &ParamSet) -> Result<()> {
    let manifest = Manifest {
        version: FORMAT_VERSION,
        config: cfg.clone(),
        params: params
            .ids()
            .map(|id| ManifestParam {
                name: params.name(id).to_string(),
                shape: params.shape(id).to_vec(),
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
    let ctx = |e| Error::io(path.display().to_string(), e);
    let mut w = BufWriter::new(File::create(path).map_err(ctx)?);
    w.write_all(MAGIC).map_err(ctx)?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes()).map_err(ctx)?;
    w.write_all(&manifest_bytes).map_err(ctx)?;
    for id in params.ids() {
        for v in params.data(id) {
            w.write_all(&v.to_le_bytes()).map_err(ctx)?;
        }
    }
    w.flush().map_err(ctx)
}

struct RawCheckpoint {
    config: ModelConfig,
    entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

fn load_raw(path: &Path) -> Result<RawCheckpoint> {
    let ctx = |e| Error::io(path.display().to_string(), e);
    let mut r = BufReader::new(File::open(path).map_err(ctx)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(ctx)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(ctx)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes).map_err(ctx)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Format(format!("bad checkpoint manifest: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {} unsupported (expected {})",
            manifest.version, FORMAT_VERSION
        )));
    }
    let mut entries = Vec::with_capacity(manifest.params.len());
    for p in manifest.params {
        let n: usize = p.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("checkpoint truncated inside `{}`", p.name)))?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((p.name, p.shape, data));
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(Error::Format("trailing bytes after checkpoint data".into())),
        Err(e) => return Err(ctx(e)),
    }
    Ok(RawCheckpoint { config: manifest.config, entries })
}

/// Rebuild the model and its parameter set from a checkpoint. The model is
/// constructed fresh (registration order is deterministic) and every buffer
/// is then overwritten with the stored values.
pub fn load(path: &Path) -> Result<(Model, ParamSet)> {
    let raw = load_raw(path)?;
    let mut params = ParamSet::new();
    let model = Model::new(raw.config, &mut params, &TrainRng::new(0))?;
    if params.len() != raw.entries.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model wants {}",
            raw.entries.len(),
            params.len()
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    for (id, (name, shape, data)) in ids.into_iter().zip(raw.entries) {
        if params.name(id) != name || params.shape(id) != shape.as_slice() {
            return Err(Error::Format(format!(
                "checkpoint parameter `{}` {:?} does not match model slot `{}` {:?}",
                name,
                shape,
                params.name(id),
                params.shape(id)
            )));
        }
        params.data_mut(id).copy_from_slice(&data);
    }
    Ok((model, params))
}
