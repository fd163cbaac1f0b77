//! Data filtering networks at desk scale.
//!
//! A small two-tower contrastive model is trained on curated image-text
//! pairs, then used as a pointwise filter over a large noisy pool: each pair
//! is scored by the cosine similarity of its two embeddings and kept when the
//! score clears a threshold calibrated to a target keep fraction. A fresh
//! model trained on the surviving pairs (the induced model) measures how good
//! the filter was.
//!
//! Images and captions are represented by pre-extracted feature vectors drawn
//! from a synthetic concept world (see [`data::World`]).

pub mod clip;
pub mod data;
mod error;
pub mod eval;
pub mod experiments;
pub mod filter;
pub mod rng;

pub use clip::{TrainConfig, TwoTowerModel};
pub use data::{Pool, Record, ShardSet, SyntheticSpec};
pub use error::{Error, Result};
pub use eval::{EvalReport, EvalSuite};
pub use filter::{Dfn, FilterReport, Scorer, Selection};
