//! Checkpoint directory: `manifest.json`, `params/<path>.f32`, `state/<name>.f32`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, WeatherStats};
use crate::binio::{create_dir, read_f32, read_json, write_f32, write_json};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub path: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub model_id: String,
    pub config: ModelConfig,
    pub config_hash: String,
    pub seed: u64,
    pub parameter_count: usize,
    pub weather_stats: WeatherStats,
    pub params: Vec<ParamRecord>,
    /// Auxiliary tensors (optimizer moments), same encoding as parameters.
    pub state: Vec<ParamRecord>,
    /// Metric history and training bookkeeping.
    pub metrics: serde_json::Value,
}

/// A model plus the training state stored next to it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub state: Vec<(String, Tensor<f32>)>,
    pub metrics: serde_json::Value,
}

fn write_blobs(dir: &Path, sub: &str, items: &[(&str, &Tensor<f32>)]) -> Result<Vec<ParamRecord>> {
    create_dir(&dir.join(sub))?;
    items
        .iter()
        .map(|(name, t)| {
            let file = format!("{sub}/{name}.f32");
            write_f32(&dir.join(&file), t.data())?;
            Ok(ParamRecord { path: name.to_string(), shape: t.shape().to_vec(), file })
        })
        .collect()
}

fn read_blob(dir: &Path, rec: &ParamRecord) -> Result<Tensor<f32>> {
    let n = rec.shape.iter().product();
    Ok(Tensor::new(rec.shape.clone(), read_f32(&dir.join(&rec.file), &rec.path, n)?))
}

pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    state: &[(String, Tensor<f32>)],
    metrics: serde_json::Value,
) -> Result<()> {
    create_dir(dir)?;
    let params: Vec<(&str, &Tensor<f32>)> =
        model.store.entries().iter().map(|e| (e.name.as_str(), e.value.as_ref())).collect();
    let params = write_blobs(dir, "params", &params)?;
    let state: Vec<(&str, &Tensor<f32>)> = state.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let state = write_blobs(dir, "state", &state)?;
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        model_id: model.model_id(),
        config: model.config.clone(),
        config_hash: model.config_hash().to_string(),
        seed: model.config.seed,
        parameter_count: model.count_parameters(),
        weather_stats: model.weather_stats.clone(),
        params,
        state,
        metrics,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Rebuilds the model from its config and overwrites every parameter from disk.
/// Missing, extra or mis-shaped parameters are format errors.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join("manifest.json");
    let manifest: Manifest = read_json(&mpath)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(&mpath, "format", format!("unsupported checkpoint format {:?}", manifest.format)));
    }
    let mut model = Model::new(manifest.config.clone(), manifest.weather_stats.clone())?;
    if model.config_hash() != manifest.config_hash {
        return Err(Error::format(&mpath, "config_hash", "does not match the stored config"));
    }
    let mut seen = BTreeSet::new();
    for rec in &manifest.params {
        let id = model
            .store
            .id(&rec.path)
            .ok_or_else(|| Error::format(&mpath, &rec.path, "parameter does not exist in this architecture"))?;
        if model.store.get(id).shape() != rec.shape.as_slice() {
            return Err(Error::format(
                &mpath,
                &rec.path,
                format!("shape {:?}, architecture expects {:?}", rec.shape, model.store.get(id).shape()),
            ));
        }
        model.store.set(id, read_blob(dir, rec)?);
        seen.insert(rec.path.clone());
    }
    if let Some(missing) = model.store.entries().iter().find(|e| !seen.contains(&e.name)) {
        return Err(Error::format(&mpath, &missing.name, "parameter missing from checkpoint"));
    }
    let state = manifest.state.iter().map(|r| Ok((r.path.clone(), read_blob(dir, r)?))).collect::<Result<_>>()?;
    Ok(Checkpoint { model, state, metrics: manifest.metrics })
}
