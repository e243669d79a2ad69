//! A complete trainable model: backbone, optional preference network and
//! the flat parameter store they share.

use serde::{Deserialize, Serialize};

use crate::backbone::{Arch, Backbone, NetConfig};
use crate::data::{InteractionRecord, StageLabel};
use crate::error::ModelError;
use crate::nn::ParamStore;
use crate::preference::{AttentionAxis, PreferenceNet};
use crate::seed::keyed_rng;
use crate::trainer::loss::bce;

/// Everything needed to rebuild a model's structure and initial weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub task_names: Vec<String>,
    pub user_vocab: Vec<usize>,
    pub item_vocab: Vec<usize>,
    pub net: NetConfig,
    /// Embedding width of the preference network's own user tables.
    pub preference_dim: usize,
    pub attention_axis: AttentionAxis,
    pub seed: u64,
}

impl ModelSpec {
    pub fn num_tasks(&self) -> usize {
        self.task_names.len()
    }
}

/// One training example as seen by the loss.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub user: &'a [u32],
    pub item: &'a [u32],
    pub stage: Option<StageLabel>,
    pub labels: &'a [u8],
    /// Pseudo-label targets, `None` for history-less records.
    pub pseudo: Option<&'a [f64]>,
}

impl<'a> Sample<'a> {
    pub fn from_record(rec: &'a InteractionRecord, stage: Option<StageLabel>, pseudo: Option<&'a [f64]>) -> Self {
        Sample {
            user: &rec.user_features,
            item: &rec.item_features,
            stage,
            labels: &rec.labels,
            pseudo,
        }
    }
}

/// Per-task weights on the task losses.
#[derive(Debug, Clone, Copy)]
pub enum TaskWeights<'a> {
    /// Stage weights `γ` or fixed `η`.
    Fixed(&'a [f64]),
    /// The sample's own preference predictions, detached from the graph.
    Preference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleLoss {
    /// Unweighted cross-entropy per task.
    pub task: Vec<f64>,
    /// Squared preference error per task (zero when masked).
    pub preference: Vec<f64>,
    /// Weight applied to each task loss.
    pub weights: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    store: ParamStore,
    backbone: Backbone,
    preference: Option<PreferenceNet>,
}

impl Model {
    /// Builds the architecture and initialises weights from `spec.seed`.
    pub fn new(spec: ModelSpec) -> Result<Self, ModelError> {
        let mut rng = keyed_rng(spec.seed, "init");
        let mut store = ParamStore::new();
        let k = spec.num_tasks();
        let backbone = Backbone::new(
            &mut store,
            spec.arch,
            k,
            &spec.user_vocab,
            &spec.item_vocab,
            &spec.net,
            &mut rng,
        )?;
        let preference = if spec.arch.has_preference() {
            if spec.preference_dim == 0 || spec.preference_dim > crate::backbone::MAX_WIDTH {
                return Err(ModelError::Config(format!(
                    "preference width {} outside 1..={}",
                    spec.preference_dim,
                    crate::backbone::MAX_WIDTH
                )));
            }
            Some(PreferenceNet::new(
                &mut store,
                "pref",
                &spec.user_vocab,
                spec.preference_dim,
                k,
                spec.attention_axis,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Model {
            spec,
            store,
            backbone,
            preference,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn arch(&self) -> Arch {
        self.spec.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn params(&self) -> &[f64] {
        self.store.data()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.store.data_mut()
    }

    pub fn load_params(&mut self, values: &[f64]) -> Result<(), ModelError> {
        self.store.load(values).map_err(ModelError::Shape)
    }

    pub fn num_params(&self) -> usize {
        self.store.len()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn preference(&self) -> Option<&PreferenceNet> {
        self.preference.as_ref()
    }

    pub fn predict(&self, p: &[f64], rec: &InteractionRecord, stage: Option<StageLabel>) -> Result<Vec<f64>, ModelError> {
        self.backbone.predict(p, &rec.user_features, &rec.item_features, stage)
    }

    /// Preference predictions `ỹ` for a user feature vector, if the
    /// architecture has a preference network.
    pub fn preferences(&self, p: &[f64], user: &[u32]) -> Result<Option<Vec<f64>>, ModelError> {
        self.preference.as_ref().map(|n| n.predict(p, user)).transpose()
    }

    /// Loss of one sample; when `grad` is given, parameter gradients are
    /// accumulated into it.
    pub fn loss_and_grad(
        &self,
        p: &[f64],
        sample: &Sample<'_>,
        weights: TaskWeights<'_>,
        grad: Option<&mut [f64]>,
    ) -> Result<SampleLoss, ModelError> {
        let k = self.spec.num_tasks();
        if sample.labels.len() != k {
            return Err(ModelError::Shape(format!("{} labels for {k} tasks", sample.labels.len())));
        }
        let pref_cache = match &self.preference {
            Some(net) => Some(net.forward(p, sample.user)?),
            None => None,
        };
        let weights: Vec<f64> = match weights {
            TaskWeights::Fixed(w) => {
                if w.len() != k {
                    return Err(ModelError::Shape(format!("{} task weights for {k} tasks", w.len())));
                }
                w.to_vec()
            }
            TaskWeights::Preference => match &pref_cache {
                Some(c) => c.predictions.clone(),
                None => {
                    return Err(ModelError::Config(
                        "preference weighting needs a preference network".into(),
                    ))
                }
            },
        };
        let cache = self.backbone.forward(p, sample.user, sample.item, sample.stage)?;
        let task: Vec<f64> = cache
            .predictions
            .iter()
            .zip(sample.labels)
            .map(|(&y, &l)| bce(y, l))
            .collect();
        let mut preference = vec![0.0; k];
        if let (Some(c), Some(target)) = (&pref_cache, sample.pseudo) {
            if target.len() != k {
                return Err(ModelError::Shape(format!("{} pseudo-labels for {k} tasks", target.len())));
            }
            for ((e, &y), &l) in preference.iter_mut().zip(&c.predictions).zip(target) {
                *e = (l - y) * (l - y);
            }
        }
        let total = task.iter().zip(&weights).map(|(l, w)| w * l).sum::<f64>() + preference.iter().sum::<f64>();

        if let Some(g) = grad {
            let d_logits: Vec<f64> = cache
                .predictions
                .iter()
                .zip(sample.labels)
                .zip(&weights)
                .map(|((&y, &l), &w)| w * (y - f64::from(l)))
                .collect();
            self.backbone.backward(p, &cache, &d_logits, g);
            if let (Some(net), Some(c), Some(target)) = (&self.preference, &pref_cache, sample.pseudo) {
                let d_pref: Vec<f64> = c.predictions.iter().zip(target).map(|(&y, &l)| 2.0 * (y - l)).collect();
                net.backward(p, c, &d_pref, g);
            }
        }
        Ok(SampleLoss {
            task,
            preference,
            weights,
            total,
        })
    }
}
