//! Stage-adaptive multi-task recommendation toolkit.
//!
//! The crate is organised around the training pipeline:
//!
//! - [`data`]: interaction records, CSV ingestion, chronological splits,
//!   staytime binning, pseudo-labels and rule-based lifecycle stages.
//! - [`synthgen`]: a synthetic lifecycle log generator with known latent
//!   stages, used as ground truth.
//! - [`backbone`]: embedding input, CGC expert/gate layers, towers and the
//!   baseline architectures.
//! - [`preference`]: the user preference network (self-attention, task
//!   attention, prediction heads).
//! - [`model`]: a backbone plus optional preference network over one
//!   flat parameter vector, with the per-sample joint loss.
//! - [`stage_tracker`]: per-(user, task) Beta posteriors and stage weights.
//! - [`trainer`]: the joint objective, Adam optimisation, checkpoints.
//! - [`eval`]: AUC, NDCG@k, RelaImpr, reports and the stage-subset study.
//! - [`cli`]: the experiment runner behind the `stan` binary.

pub mod backbone;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod preference;
pub mod seed;
pub mod stage_tracker;
pub mod synthgen;
pub mod trainer;

pub use backbone::Arch;
pub use data::{Dataset, InteractionRecord, SplitTag, StageLabel};
pub use error::{DataError, MetricError, ModelError, StageError, TrainError};
