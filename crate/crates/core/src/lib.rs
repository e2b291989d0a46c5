//! One-stage referring expression grounding: a bi-GRU text encoder, a small
//! conv backbone, adaptive multi-scale feature selection (AFS), global
//! attentive reasoning (GARAN) and an anchor-based box head, trained end to end
//! on synthetic scenes.

pub mod afs;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod ctx;
pub mod data;
mod error;
pub mod eval;
pub mod garan;
pub mod head;
pub mod model;
pub mod optim;
pub mod params;
pub mod text;
pub mod train;
pub mod visualize;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use config::{DataConfig, ModelConfig, RunConfig, TrainConfig};
pub use error::{Result, RginError};
pub use model::{Model, Prediction};
