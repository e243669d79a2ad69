//! Joint optimisation of backbone and preference network.
//!
//! Each epoch the trainer (for `stan`) predicts preferences on every
//! training record, rebuilds the Beta posteriors from scratch in
//! chronological order, and draws `γ`. It then runs Adam over seeded
//! shuffled batches and scores the validation split. Baselines replace `γ`
//! by fixed task weights `η`; `stan_no_beta` uses each sample's detached
//! preference prediction as its weight.
//!
//! Batch gradients are computed in parallel over fixed-size chunks and
//! summed in chunk order, so results do not depend on the thread count.

mod checkpoint;
pub mod loss;

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointExtras, LoadedCheckpoint, Manifest};

use crate::backbone::{Arch, NetConfig};
use crate::data::{compute_pseudo_labels, fit_rule_stages, Dataset, StageLabel, StageRule, Window};
use crate::error::{MetricError, TrainError};
use crate::eval::auc;
use crate::model::{Model, ModelSpec, Sample, TaskWeights};
use crate::nn::{AdamConfig, AdamState};
use crate::preference::AttentionAxis;
use crate::seed::keyed_rng;
use crate::stage_tracker::{GammaMode, GammaSchedule, GammaTable, PosteriorStore};

/// Samples per parallel gradient chunk.
const CHUNK: usize = 128;

/// Treatment of records whose user has no earlier history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryPolicy {
    /// Left out of the preference loss.
    #[default]
    Exclude,
    /// Target set to the training split's mean label per task.
    GlobalMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Arch,
    pub net: NetConfig,
    pub preference_dim: usize,
    pub attention_axis: AttentionAxis,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fixed task weights `η` for baselines; empty means 1 for every task.
    pub task_weights: Vec<f64>,
    pub gamma_mode: GammaMode,
    pub gamma_schedule: GammaSchedule,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub window: Window,
    pub history: HistoryPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::Stan,
            net: NetConfig::default(),
            preference_dim: 128,
            attention_axis: AttentionAxis::Feature,
            adam: AdamConfig::default(),
            batch_size: 2048,
            epochs: 20,
            seed: 0,
            task_weights: Vec::new(),
            gamma_mode: GammaMode::Sampled,
            gamma_schedule: GammaSchedule::PerEpoch,
            patience: 3,
            window: Window::Unlimited,
            history: HistoryPolicy::Exclude,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_tasks: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        let a = &self.adam;
        if !(a.lr > 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return bad(format!("invalid Adam settings {a:?}"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return bad("batch size, epochs and patience must be positive".into());
        }
        if !self.task_weights.is_empty() {
            if self.arch.has_preference() {
                return bad(format!("fixed task weights do not apply to {}", self.arch));
            }
            if self.task_weights.len() != num_tasks || self.task_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
                return bad(format!(
                    "need {num_tasks} positive task weights, got {:?}",
                    self.task_weights
                ));
            }
        }
        self.net.validate().map_err(TrainError::Model)
    }
}

/// Rule stages fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleStages {
    pub rule: StageRule,
    pub by_user: BTreeMap<String, StageLabel>,
}

impl RuleStages {
    pub fn fit(train: &Dataset) -> Result<Self, TrainError> {
        let (rule, by_user) = fit_rule_stages(train)?;
        Ok(RuleStages { rule, by_user })
    }

    /// Users without training history count as `New`.
    pub fn stage_of(&self, user: &str) -> StageLabel {
        self.by_user.get(user).copied().unwrap_or(StageLabel::New)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Mean unweighted cross-entropy per task on the training split.
    pub train_task_loss: Vec<f64>,
    /// Mean squared preference error per task over records with history.
    pub train_preference_loss: Vec<f64>,
    /// Validation AUC per task; NaN where undefined.
    #[serde(with = "checkpoint::nan_vec")]
    pub valid_auc: Vec<f64>,
    #[serde(with = "checkpoint::nan_f64")]
    pub mean_valid_auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub mean_auc: f64,
    pub params: Vec<f64>,
}

/// Everything needed to continue training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub best: Option<BestSnapshot>,
    pub since_best: usize,
    pub finished: bool,
    pub history: Vec<EpochSummary>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model holding the best validation parameters.
    pub model: Model,
    pub state: TrainState,
    /// Posteriors rebuilt with the final parameters (`stan` only).
    pub posteriors: Option<PosteriorStore>,
    /// `γ` drawn from those posteriors.
    pub gammas: Option<GammaTable>,
    pub stages: Option<RuleStages>,
}

/// Predictions for every record of `ds`, in record order.
pub fn predict_dataset(model: &Model, ds: &Dataset, stages: Option<&RuleStages>) -> Result<Vec<Vec<f64>>, TrainError> {
    let p = model.params();
    ds.records
        .par_iter()
        .map(|r| {
            let st = stages.map(|s| s.stage_of(&r.user_id));
            model.predict(p, r, st).map_err(TrainError::from)
        })
        .collect()
}

/// Preference predictions for every record of `ds`.
pub fn preference_predictions(model: &Model, ds: &Dataset) -> Result<Vec<Vec<f64>>, TrainError> {
    let p = model.params();
    ds.records
        .par_iter()
        .map(|r| {
            model
                .preferences(p, &r.user_features)?
                .ok_or_else(|| TrainError::Config(format!("{} has no preference network", model.arch())))
        })
        .collect()
}

/// Per-task AUC of `preds` against the labels of `ds`; NaN where a task's
/// labels are single-class.
pub fn task_aucs(ds: &Dataset, preds: &[Vec<f64>]) -> Result<Vec<f64>, TrainError> {
    (0..ds.num_tasks())
        .map(|k| {
            let scores: Vec<f64> = preds.iter().map(|p| p[k]).collect();
            let labels: Vec<u8> = ds.records.iter().map(|r| r.labels[k]).collect();
            match auc(&scores, &labels) {
                Ok(v) => Ok(v),
                Err(MetricError::SingleClass | MetricError::Empty) => Ok(f64::NAN),
                Err(e) => Err(e.into()),
            }
        })
        .collect()
}

fn nan_mean(xs: &[f64]) -> f64 {
    let finite: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

#[derive(Debug, Clone, Serialize)]
struct LogLine<'a> {
    epoch: usize,
    split: &'a str,
    task: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    preference_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    auc: Option<f64>,
}

#[derive(Debug, Clone, Default)]
struct Sums {
    task: Vec<f64>,
    preference: Vec<f64>,
    total: f64,
}

impl Sums {
    fn new(k: usize) -> Self {
        Sums {
            task: vec![0.0; k],
            preference: vec![0.0; k],
            total: 0.0,
        }
    }

    fn add(&mut self, o: &Sums) {
        crate::nn::ops::add_into(&mut self.task, &o.task);
        crate::nn::ops::add_into(&mut self.preference, &o.preference);
        self.total += o.total;
    }
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    train: &'a Dataset,
    valid: &'a Dataset,
    spec: ModelSpec,
    stages: Option<RuleStages>,
    pseudo: Vec<Option<Vec<f64>>>,
    pseudo_count: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(train: &'a Dataset, valid: &'a Dataset, cfg: TrainConfig) -> Result<Self, TrainError> {
        if train.is_empty() {
            return Err(TrainError::Config("training split is empty".into()));
        }
        if valid.task_names != train.task_names
            || valid.user_vocab != train.user_vocab
            || valid.item_vocab != train.item_vocab
        {
            return Err(TrainError::Config("training and validation schemas differ".into()));
        }
        let k = train.num_tasks();
        cfg.validate(k)?;
        let stages = if cfg.arch.uses_stage_feature() {
            Some(RuleStages::fit(train)?)
        } else {
            None
        };
        let labels = compute_pseudo_labels(train, cfg.window);
        let global_mean: Vec<f64> = (0..k)
            .map(|t| train.records.iter().map(|r| f64::from(r.labels[t])).sum::<f64>() / train.len() as f64)
            .collect();
        let pseudo: Vec<Option<Vec<f64>>> = labels
            .into_iter()
            .map(|l| match (l.has_history(), cfg.history) {
                (true, _) => Some(l.values),
                (false, HistoryPolicy::GlobalMean) => Some(global_mean.clone()),
                (false, HistoryPolicy::Exclude) => None,
            })
            .collect();
        let pseudo_count = pseudo.iter().filter(|p| p.is_some()).count();
        let spec = ModelSpec {
            arch: cfg.arch,
            task_names: train.task_names.clone(),
            user_vocab: train.user_vocab.clone(),
            item_vocab: train.item_vocab.clone(),
            net: cfg.net.clone(),
            preference_dim: cfg.preference_dim,
            attention_axis: cfg.attention_axis,
            seed: cfg.seed,
        };
        Ok(Trainer {
            cfg,
            train,
            valid,
            spec,
            stages,
            pseudo,
            pseudo_count,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn stages(&self) -> Option<&RuleStages> {
        self.stages.as_ref()
    }

    pub fn init_state(&self) -> Result<TrainState, TrainError> {
        let model = Model::new(self.spec.clone())?;
        let adam = AdamState::new(model.num_params());
        Ok(TrainState {
            model,
            adam,
            epoch: 0,
            best: None,
            since_best: 0,
            finished: false,
            history: Vec::new(),
        })
    }

    /// Posteriors rebuilt from `model`'s preference predictions on the
    /// training split.
    pub fn posteriors(&self, model: &Model) -> Result<PosteriorStore, TrainError> {
        let prefs = preference_predictions(model, self.train)?;
        Ok(PosteriorStore::from_history(self.train, &prefs)?)
    }

    fn stage_of(&self, user: &str) -> Option<StageLabel> {
        self.stages.as_ref().map(|s| s.stage_of(user))
    }

    /// Runs one epoch, appending its log lines to `log`.
    pub fn run_epoch(&self, state: &mut TrainState, log: &mut dyn Write) -> Result<EpochSummary, TrainError> {
        let e = state.epoch;
        let k = self.train.num_tasks();
        let seed = self.cfg.seed;
        let uniform = vec![1.0; k];
        let eta: &[f64] = if self.cfg.task_weights.is_empty() {
            &uniform
        } else {
            &self.cfg.task_weights
        };

        let posteriors = if self.cfg.arch == Arch::Stan {
            Some(self.posteriors(&state.model)?)
        } else {
            None
        };
        let per_epoch =
            self.cfg.gamma_mode == GammaMode::PosteriorMean || self.cfg.gamma_schedule == GammaSchedule::PerEpoch;
        let epoch_gamma = match &posteriors {
            Some(post) if per_epoch => Some(post.gammas(self.cfg.gamma_mode, seed, e, None)),
            _ => None,
        };

        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut keyed_rng(seed, &format!("shuffle/{e}")));

        let mut sums = Sums::new(k);
        for (b, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch_gamma;
            let gamma = match (&epoch_gamma, &posteriors) {
                (Some(g), _) => Some(g),
                (None, Some(post)) => {
                    batch_gamma = batch_posteriors(post, self.train, batch).gammas(self.cfg.gamma_mode, seed, e, Some(b));
                    Some(&batch_gamma)
                }
                (None, None) => None,
            };
            let model = &state.model;
            let p = model.params();
            let parts: Vec<(Vec<f64>, Sums)> = batch
                .par_chunks(CHUNK)
                .map(|chunk| -> Result<(Vec<f64>, Sums), TrainError> {
                    let mut g = vec![0.0; p.len()];
                    let mut s = Sums::new(k);
                    for &i in chunk {
                        let rec = &self.train.records[i];
                        let weights = match (self.cfg.arch, gamma) {
                            (Arch::StanNoBeta, _) => TaskWeights::Preference,
                            (_, Some(gt)) => TaskWeights::Fixed(
                                gt.get(&rec.user_id).expect("every training user has a posterior"),
                            ),
                            (_, None) => TaskWeights::Fixed(eta),
                        };
                        let sample = Sample::from_record(rec, self.stage_of(&rec.user_id), self.pseudo[i].as_deref());
                        let l = model.loss_and_grad(p, &sample, weights, Some(&mut g))?;
                        crate::nn::ops::add_into(&mut s.task, &l.task);
                        crate::nn::ops::add_into(&mut s.preference, &l.preference);
                        s.total += l.total;
                    }
                    Ok((g, s))
                })
                .collect::<Result<_, _>>()?;

            let mut grad = vec![0.0; p.len()];
            let mut batch_sums = Sums::new(k);
            for (g, s) in &parts {
                crate::nn::ops::add_into(&mut grad, g);
                batch_sums.add(s);
            }
            let n = batch.len() as f64;
            let loss = batch_sums.total / n;
            if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::Diverged { epoch: e, batch: b, loss });
            }
            grad.iter_mut().for_each(|v| *v /= n);
            state.adam.update(&self.cfg.adam, state.model.params_mut(), &grad);
            sums.add(&batch_sums);
        }

        let n = self.train.len() as f64;
        let train_task_loss: Vec<f64> = sums.task.iter().map(|v| v / n).collect();
        let denom = self.pseudo_count.max(1) as f64;
        let train_preference_loss: Vec<f64> = if self.cfg.arch.has_preference() {
            sums.preference.iter().map(|v| v / denom).collect()
        } else {
            Vec::new()
        };
        let valid_auc = if self.valid.is_empty() {
            vec![f64::NAN; k]
        } else {
            let preds = predict_dataset(&state.model, self.valid, self.stages.as_ref())?;
            task_aucs(self.valid, &preds)?
        };
        let mean_valid_auc = nan_mean(&valid_auc);

        for (t, name) in self.train.task_names.iter().enumerate() {
            let line = LogLine {
                epoch: e,
                split: "train",
                task: name,
                loss: Some(train_task_loss[t]),
                preference_loss: train_preference_loss.get(t).copied(),
                auc: None,
            };
            writeln!(log, "{}", serde_json::to_string(&line)?)?;
        }
        for (t, name) in self.train.task_names.iter().enumerate() {
            let line = LogLine {
                epoch: e,
                split: "valid",
                task: name,
                loss: None,
                preference_loss: None,
                auc: Some(valid_auc[t]).filter(|v| !v.is_nan()),
            };
            writeln!(log, "{}", serde_json::to_string(&line)?)?;
        }

        let summary = EpochSummary {
            epoch: e,
            train_task_loss,
            train_preference_loss,
            valid_auc,
            mean_valid_auc,
        };
        let improved = match &state.best {
            None => true,
            Some(b) => mean_valid_auc > b.mean_auc || (b.mean_auc.is_nan() && mean_valid_auc.is_nan()),
        };
        if improved {
            state.best = Some(BestSnapshot {
                epoch: e,
                mean_auc: mean_valid_auc,
                params: state.model.params().to_vec(),
            });
            state.since_best = 0;
        } else {
            state.since_best += 1;
        }
        state.epoch += 1;
        state.finished = state.epoch >= self.cfg.epochs || state.since_best >= self.cfg.patience;
        state.history.push(summary.clone());
        log::info!(
            "{} epoch {e}: train loss {:?}, valid auc {:?}",
            self.cfg.arch,
            summary.train_task_loss,
            summary.valid_auc
        );
        Ok(summary)
    }

    /// Trains until the epoch budget or early stopping ends the run.
    pub fn run(&self, mut state: TrainState, log: &mut dyn Write) -> Result<TrainOutcome, TrainError> {
        while !state.finished {
            self.run_epoch(&mut state, log)?;
        }
        self.finish(state)
    }

    /// Restores the best parameters and rebuilds the final posteriors.
    pub fn finish(&self, state: TrainState) -> Result<TrainOutcome, TrainError> {
        let mut model = state.model.clone();
        if let Some(best) = &state.best {
            model.load_params(&best.params)?;
        }
        let (posteriors, gammas) = if self.cfg.arch == Arch::Stan {
            let post = self.posteriors(&model)?;
            let g = post.gammas(self.cfg.gamma_mode, self.cfg.seed, state.epoch, None);
            (Some(post), Some(g))
        } else {
            (None, None)
        };
        Ok(TrainOutcome {
            model,
            state,
            posteriors,
            gammas,
            stages: self.stages.clone(),
        })
    }
}

/// Posteriors restricted to the users appearing in `batch`.
fn batch_posteriors(post: &PosteriorStore, ds: &Dataset, batch: &[usize]) -> PosteriorStore {
    let mut out = PosteriorStore::new(post.num_tasks());
    for &i in batch {
        let u = &ds.records[i].user_id;
        if out.get(u).is_none() {
            if let Some(p) = post.get(u) {
                out.insert(u, p.to_vec());
            }
        }
    }
    out
}

/// Trains `cfg.arch` from scratch without writing a log.
pub fn train(train: &Dataset, valid: &Dataset, cfg: TrainConfig) -> Result<TrainOutcome, TrainError> {
    let trainer = Trainer::new(train, valid, cfg)?;
    let state = trainer.init_state()?;
    trainer.run(state, &mut std::io::sink())
}
