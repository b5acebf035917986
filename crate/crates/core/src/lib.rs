//! Intent-guided sequential recommendation.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod icr;
pub mod idr;
pub mod lid;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use checkpoint::{load_model, save_model};
pub use config::{ModelConfig, TrainConfig};
pub use data::{InteractionDataset, LeaveOneOut, Sequences, SyntheticConfig};
pub use experiment::{Condition, ExperimentConfig, ExperimentReport, Lab};
pub use metrics::RankingMetrics;
pub use model::{Model, Variant};
pub use tensor::{Graph, Tensor, Var};
