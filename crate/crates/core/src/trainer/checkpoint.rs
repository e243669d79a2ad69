//! Checkpoint directory: `manifest.json`, raw little-endian `f64` parameter
//! and optimizer files, and CSV exports of posteriors, `γ` and rule stages.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BestSnapshot, EpochSummary, RuleStages, TrainConfig, TrainState};
use crate::backbone::Arch;
use crate::error::TrainError;
use crate::model::{Model, ModelSpec};
use crate::nn::{AdamState, TensorSpec};
use crate::stage_tracker::{GammaTable, PosteriorStore};

const FORMAT_VERSION: u32 = 1;

/// `f64` fields serialised with NaN as `null`.
pub(crate) mod nan_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

pub(crate) mod nan_vec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let opt: Vec<Option<f64>> = v.iter().map(|x| (!x.is_nan()).then_some(*x)).collect();
        opt.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let opt = Vec::<Option<f64>>::deserialize(d)?;
        Ok(opt.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub crate_version: String,
    pub arch: Arch,
    pub config_hash: String,
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub epoch: usize,
    pub finished: bool,
    pub since_best: usize,
    pub best_epoch: Option<usize>,
    #[serde(with = "nan_f64")]
    pub best_mean_auc: f64,
    pub adam_step: u64,
    pub num_params: usize,
    pub history: Vec<EpochSummary>,
    pub tensors: Vec<TensorSpec>,
}

/// Optional exports written next to the training state.
#[derive(Debug, Clone, Copy, Default)]
pub struct CheckpointExtras<'a> {
    pub posteriors: Option<&'a PosteriorStore>,
    pub gammas: Option<&'a GammaTable>,
    pub stages: Option<&'a RuleStages>,
}

fn ck(e: impl std::fmt::Display) -> TrainError {
    TrainError::Checkpoint(e.to_string())
}

fn write_f64s(path: &Path, values: &[f64]) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>, TrainError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() != expected * 8 {
        return Err(ck(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn save_checkpoint(
    dir: &Path,
    state: &TrainState,
    cfg: &TrainConfig,
    config_hash: &str,
    extras: CheckpointExtras<'_>,
) -> Result<(), TrainError> {
    fs::create_dir_all(dir)?;
    let model = &state.model;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        arch: model.arch(),
        config_hash: config_hash.to_string(),
        spec: model.spec().clone(),
        train: cfg.clone(),
        epoch: state.epoch,
        finished: state.finished,
        since_best: state.since_best,
        best_epoch: state.best.as_ref().map(|b| b.epoch),
        best_mean_auc: state.best.as_ref().map_or(f64::NAN, |b| b.mean_auc),
        adam_step: state.adam.step,
        num_params: model.num_params(),
        history: state.history.clone(),
        tensors: model.store().specs().to_vec(),
    };
    let mut f = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f)?;
    f.flush()?;

    write_f64s(&dir.join("params.bin"), model.params())?;
    if let Some(best) = &state.best {
        write_f64s(&dir.join("best_params.bin"), &best.params)?;
    }
    let mut moments = state.adam.m.clone();
    moments.extend_from_slice(&state.adam.v);
    write_f64s(&dir.join("optimizer.bin"), &moments)?;

    let names = &model.spec().task_names;
    if let Some(post) = extras.posteriors {
        post.write_csv(File::create(dir.join("posteriors.csv"))?, names).map_err(ck)?;
    }
    if let Some(g) = extras.gammas {
        g.write_csv(File::create(dir.join("gamma.csv"))?, names).map_err(ck)?;
    }
    if let Some(st) = extras.stages {
        let mut w = csv::Writer::from_path(dir.join("stages.csv")).map_err(ck)?;
        w.write_record(["user_id", "stage"]).map_err(ck)?;
        for (u, s) in &st.by_user {
            w.write_record([u.as_str(), s.name()]).map_err(ck)?;
        }
        w.flush()?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub manifest: Manifest,
    pub state: TrainState,
}

impl LoadedCheckpoint {
    /// The model with its best validation parameters (or the latest ones
    /// when no epoch finished).
    pub fn best_model(&self) -> Result<Model, TrainError> {
        let mut m = self.state.model.clone();
        if let Some(b) = &self.state.best {
            m.load_params(&b.params)?;
        }
        Ok(m)
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint, TrainError> {
    let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(dir.join("manifest.json"))?))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ck(format!("unsupported checkpoint format {}", manifest.format_version)));
    }
    let mut model = Model::new(manifest.spec.clone())?;
    if model.num_params() != manifest.num_params || model.store().specs() != manifest.tensors.as_slice() {
        return Err(ck("tensor layout in manifest does not match the architecture"));
    }
    let n = model.num_params();
    model.load_params(&read_f64s(&dir.join("params.bin"), n)?)?;
    let best = match manifest.best_epoch {
        Some(epoch) => Some(BestSnapshot {
            epoch,
            mean_auc: manifest.best_mean_auc,
            params: read_f64s(&dir.join("best_params.bin"), n)?,
        }),
        None => None,
    };
    let moments = read_f64s(&dir.join("optimizer.bin"), 2 * n)?;
    let adam = AdamState {
        step: manifest.adam_step,
        m: moments[..n].to_vec(),
        v: moments[n..].to_vec(),
    };
    let state = TrainState {
        model,
        adam,
        epoch: manifest.epoch,
        best,
        since_best: manifest.since_best,
        finished: manifest.finished,
        history: manifest.history.clone(),
    };
    Ok(LoadedCheckpoint { manifest, state })
}
