//! Multi-view conversational recommendation: conversation, knowledge-graph
//! and review encoders aligned by coarse-to-fine contrastive pre-training,
//! then fine-tuned into an item recommender and a response generator.

pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod encoders;
mod error;
pub mod eval;
pub mod generator;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod recommender;
pub mod trainer;

pub use config::{ModelConfig, ViewSet};
pub use error::{Error, Result};
pub use model::C2Crs;
pub use trainer::TrainConfig;
