//! Learned active-learning query policies.
//!
//! A meta-network turns per-dimension histogram embeddings of a dataset into
//! encoder/decoder weights, so one policy can be trained across datasets of
//! different dimensionality and transferred to new ones.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod diff;
pub mod embed;
pub mod env;
pub mod error;
pub mod eval;
pub mod par;
pub mod policy;
pub mod seed;
pub mod svm;
pub mod trainer;

pub use baselines::StrategyKind;
pub use checkpoint::Checkpoint;
pub use data::{load_dataset, make_trial_split, Dataset, Manifest, Schema, TrialSplit};
pub use env::Episode;
pub use error::{Error, Result};
pub use par::Execution;
pub use policy::{ActionMode, ModelKind, PolicyModel};
pub use trainer::TrainConfig;
