//! Multi-task prediction networks.
//!
//! Every architecture maps one record's categorical features to `K`
//! probabilities through embeddings, a body (bottom MLP or gated expert
//! layers) and one tower per task. Parameters live in a shared
//! [`ParamStore`]; the network structs only hold offsets into it.

mod cgc;
mod input;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use cgc::{cgc_forward, CgcCache, CgcLayer};
pub use input::{embed_input, EmbeddingTables};

use crate::data::StageLabel;
use crate::error::ModelError;
use crate::nn::ops::sigmoid;
use crate::nn::{Mlp, MlpCache, ParamStore};

/// Upper bound on any hidden or embedding width.
pub const MAX_WIDTH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    SingleMlp,
    SharedBottom,
    Mmoe,
    Ple,
    PleStage,
    Stan,
    StanNoBeta,
}

impl Arch {
    pub const ALL: [Arch; 7] = [
        Arch::SingleMlp,
        Arch::SharedBottom,
        Arch::Mmoe,
        Arch::Ple,
        Arch::PleStage,
        Arch::Stan,
        Arch::StanNoBeta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::SingleMlp => "single_mlp",
            Arch::SharedBottom => "shared_bottom",
            Arch::Mmoe => "mmoe",
            Arch::Ple => "ple",
            Arch::PleStage => "ple_stage",
            Arch::Stan => "stan",
            Arch::StanNoBeta => "stan_no_beta",
        }
    }

    /// Architectures that carry a preference network.
    pub fn has_preference(self) -> bool {
        matches!(self, Arch::Stan | Arch::StanNoBeta)
    }

    pub fn uses_stage_feature(self) -> bool {
        self == Arch::PleStage
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| ModelError::Config(format!("unknown architecture `{s}`")))
    }
}

/// Widths and expert counts shared by all architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Width of each user-slot embedding.
    pub user_dim: usize,
    /// Width of each item-slot embedding.
    pub item_dim: usize,
    pub expert_hidden: usize,
    pub expert_dim: usize,
    /// Hidden widths of each tower, excluding its scalar output.
    pub tower_hidden: Vec<usize>,
    pub num_specific: usize,
    pub num_shared: usize,
    pub ple_layers: usize,
    pub stan_layers: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            user_dim: 128,
            item_dim: 128,
            expert_hidden: 256,
            expert_dim: 64,
            tower_hidden: vec![32],
            num_specific: 1,
            num_shared: 1,
            ple_layers: 2,
            stan_layers: 1,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let widths = [self.user_dim, self.item_dim, self.expert_hidden, self.expert_dim]
            .into_iter()
            .chain(self.tower_hidden.iter().copied());
        for w in widths {
            if w == 0 || w > MAX_WIDTH {
                return Err(ModelError::Config(format!(
                    "layer width {w} outside 1..={MAX_WIDTH}"
                )));
            }
        }
        if self.num_specific + self.num_shared == 0 {
            return Err(ModelError::Config("at least one expert is required".into()));
        }
        if self.ple_layers == 0 || self.stan_layers == 0 {
            return Err(ModelError::Config("gated architectures need at least one layer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Body {
    /// One embedding set and bottom per task.
    Single {
        tables: Vec<EmbeddingTables>,
        bottoms: Vec<Mlp>,
    },
    Shared {
        tables: EmbeddingTables,
        bottom: Mlp,
    },
    Gated {
        tables: EmbeddingTables,
        layers: Vec<CgcLayer>,
    },
}

#[derive(Debug, Clone)]
enum BodyCache {
    Single { bottoms: Vec<MlpCache> },
    Shared { bottom: MlpCache },
    Gated { layers: Vec<CgcCache> },
}

/// Forward activations of one record.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    user: Vec<u32>,
    item: Vec<u32>,
    body: BodyCache,
    towers: Vec<MlpCache>,
    pub logits: Vec<f64>,
    pub predictions: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    arch: Arch,
    num_tasks: usize,
    body: Body,
    towers: Vec<Mlp>,
}

impl Backbone {
    /// Builds and registers the parameters of `arch`. For `ple_stage` a
    /// four-way stage slot is appended to the user slots.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        arch: Arch,
        num_tasks: usize,
        user_vocab: &[usize],
        item_vocab: &[usize],
        cfg: &NetConfig,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        if num_tasks == 0 {
            return Err(ModelError::Config("at least one task is required".into()));
        }
        let mut user_vocab = user_vocab.to_vec();
        if arch.uses_stage_feature() {
            user_vocab.push(StageLabel::ALL.len());
        }
        let tables =
            |store: &mut ParamStore, name: &str, rng: &mut R| {
                EmbeddingTables::new(store, name, &user_vocab, cfg.user_dim, item_vocab, cfg.item_dim, rng)
            };
        let bottom_dims = |in_dim| [in_dim, cfg.expert_hidden, cfg.expert_dim];

        let body = match arch {
            Arch::SingleMlp => {
                let mut all_tables = Vec::with_capacity(num_tasks);
                let mut bottoms = Vec::with_capacity(num_tasks);
                for k in 0..num_tasks {
                    let t = tables(store, &format!("task{k}.emb"), rng);
                    bottoms.push(Mlp::new(store, &format!("task{k}.bottom"), &bottom_dims(t.input_dim()), true, rng));
                    all_tables.push(t);
                }
                Body::Single {
                    tables: all_tables,
                    bottoms,
                }
            }
            Arch::SharedBottom => {
                let t = tables(store, "emb", rng);
                let bottom = Mlp::new(store, "bottom", &bottom_dims(t.input_dim()), true, rng);
                Body::Shared { tables: t, bottom }
            }
            Arch::Mmoe | Arch::Ple | Arch::PleStage | Arch::Stan | Arch::StanNoBeta => {
                let t = tables(store, "emb", rng);
                let (n_sp, n_sh, num_layers) = match arch {
                    Arch::Mmoe => (0, cfg.num_specific + cfg.num_shared, 1),
                    Arch::Stan | Arch::StanNoBeta => (cfg.num_specific, cfg.num_shared, cfg.stan_layers),
                    _ => (cfg.num_specific, cfg.num_shared, cfg.ple_layers),
                };
                let mut layers = Vec::with_capacity(num_layers);
                for l in 0..num_layers {
                    let in_dim = if l == 0 { t.input_dim() } else { cfg.expert_dim };
                    layers.push(CgcLayer::new(
                        store,
                        &format!("cgc{l}"),
                        num_tasks,
                        n_sp,
                        n_sh,
                        in_dim,
                        cfg.expert_hidden,
                        cfg.expert_dim,
                        l + 1 < num_layers,
                        rng,
                    )?);
                }
                Body::Gated { tables: t, layers }
            }
        };

        let mut tower_dims = vec![cfg.expert_dim];
        tower_dims.extend(&cfg.tower_hidden);
        tower_dims.push(1);
        let towers = (0..num_tasks)
            .map(|k| Mlp::new(store, &format!("tower{k}"), &tower_dims, false, rng))
            .collect();

        Ok(Backbone {
            arch,
            num_tasks,
            body,
            towers,
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn towers(&self) -> &[Mlp] {
        &self.towers
    }

    /// Gated expert layers; empty for the MLP architectures.
    pub fn cgc_layers(&self) -> &[CgcLayer] {
        match &self.body {
            Body::Gated { layers, .. } => layers,
            _ => &[],
        }
    }

    fn user_input(&self, user: &[u32], stage: Option<StageLabel>) -> Result<Vec<u32>, ModelError> {
        let mut u = user.to_vec();
        if self.arch.uses_stage_feature() {
            let st = stage.ok_or_else(|| ModelError::Config("ple_stage needs a stage label per record".into()))?;
            u.push(st.index() as u32);
        }
        Ok(u)
    }

    pub fn forward(
        &self,
        p: &[f64],
        user: &[u32],
        item: &[u32],
        stage: Option<StageLabel>,
    ) -> Result<BackboneCache, ModelError> {
        let user = self.user_input(user, stage)?;
        let (body, reps): (BodyCache, Vec<Vec<f64>>) = match &self.body {
            Body::Single { tables, bottoms } => {
                let mut caches = Vec::with_capacity(self.num_tasks);
                for (t, b) in tables.iter().zip(bottoms) {
                    caches.push(b.forward(p, &t.embed(p, &user, item)?));
                }
                let reps = caches.iter().map(|c| c.output().to_vec()).collect();
                (BodyCache::Single { bottoms: caches }, reps)
            }
            Body::Shared { tables, bottom } => {
                let c = bottom.forward(p, &tables.embed(p, &user, item)?);
                let reps = vec![c.output().to_vec(); self.num_tasks];
                (BodyCache::Shared { bottom: c }, reps)
            }
            Body::Gated { tables, layers } => {
                let x = tables.embed(p, &user, item)?;
                let mut caches: Vec<CgcCache> = Vec::with_capacity(layers.len());
                for layer in layers {
                    let c = match caches.last() {
                        None => layer.forward(p, &vec![x.clone(); self.num_tasks], &x),
                        Some(prev) => layer.forward(
                            p,
                            &prev.task_outputs,
                            prev.shared_output.as_deref().expect("non-final layers have a shared gate"),
                        ),
                    };
                    caches.push(c);
                }
                let reps = caches.last().map(|c| c.task_outputs.clone()).unwrap_or_default();
                (BodyCache::Gated { layers: caches }, reps)
            }
        };
        let towers: Vec<MlpCache> = self.towers.iter().zip(&reps).map(|(t, g)| t.forward(p, g)).collect();
        let logits: Vec<f64> = towers.iter().map(|c| c.output()[0]).collect();
        let predictions = logits.iter().map(|&z| sigmoid(z)).collect();
        Ok(BackboneCache {
            user,
            item: item.to_vec(),
            body,
            towers,
            logits,
            predictions,
        })
    }

    pub fn predict(
        &self,
        p: &[f64],
        user: &[u32],
        item: &[u32],
        stage: Option<StageLabel>,
    ) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward(p, user, item, stage)?.predictions)
    }

    /// Accumulates parameter gradients given the gradient of the loss with
    /// respect to each task's logit.
    pub fn backward(&self, p: &[f64], cache: &BackboneCache, d_logits: &[f64], g: &mut [f64]) {
        let d_reps: Vec<Vec<f64>> = self
            .towers
            .iter()
            .zip(&cache.towers)
            .zip(d_logits)
            .map(|((t, c), &d)| t.backward(p, c, &[d], g))
            .collect();
        match (&self.body, &cache.body) {
            (Body::Single { tables, bottoms }, BodyCache::Single { bottoms: caches }) => {
                for k in 0..self.num_tasks {
                    let dx = bottoms[k].backward(p, &caches[k], &d_reps[k], g);
                    tables[k].backward(g, &cache.user, &cache.item, &dx);
                }
            }
            (Body::Shared { tables, bottom }, BodyCache::Shared { bottom: c }) => {
                let mut d = vec![0.0; bottom.out_dim()];
                for dr in &d_reps {
                    for (a, b) in d.iter_mut().zip(dr) {
                        *a += b;
                    }
                }
                let dx = bottom.backward(p, c, &d, g);
                tables.backward(g, &cache.user, &cache.item, &dx);
            }
            (Body::Gated { tables, layers }, BodyCache::Gated { layers: caches }) => {
                let mut d_task = d_reps;
                let mut d_shared: Option<Vec<f64>> = None;
                for (layer, c) in layers.iter().zip(caches).rev() {
                    let (dt, ds) = layer.backward(p, c, &d_task, d_shared.as_deref(), g);
                    d_task = dt;
                    d_shared = Some(ds);
                }
                // the first layer sees x on every input path
                let mut dx = d_shared.unwrap_or_default();
                for dt in &d_task {
                    for (a, b) in dx.iter_mut().zip(dt) {
                        *a += b;
                    }
                }
                tables.backward(g, &cache.user, &cache.item, &dx);
            }
            _ => unreachable!("cache built by a different architecture"),
        }
    }

    /// Per gated layer, per task: gate weights over every expert of that
    /// layer (zeros where the task has no access).
    pub fn gate_weights_full(&self, cache: &BackboneCache) -> Vec<Vec<Vec<f64>>> {
        match (&self.body, &cache.body) {
            (Body::Gated { layers, .. }, BodyCache::Gated { layers: caches }) => layers
                .iter()
                .zip(caches)
                .map(|(l, c)| (0..self.num_tasks).map(|k| l.spread(k, &c.gate_weights[k])).collect())
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// Applies a task tower to the gated representation `g`.
pub fn tower_predict(tower: &Mlp, p: &[f64], g: &[f64]) -> f64 {
    sigmoid(tower.forward(p, g).output()[0])
}
