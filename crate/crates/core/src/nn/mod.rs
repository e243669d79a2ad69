//! Minimal dense network building blocks with hand-written backward passes.
//!
//! Parameters live in one flat buffer ([`ParamStore`]) so that the optimizer,
//! checkpointing and finite-difference checks all operate on a plain slice.

mod adam;
mod layers;
pub mod ops;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use layers::{Embedding, Linear, Mlp, MlpCache};
pub use params::{Init, ParamId, ParamStore, TensorSpec};
