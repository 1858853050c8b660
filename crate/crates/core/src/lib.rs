pub mod aafn;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod inject;
pub mod layers;
pub mod model;
pub mod prompt;
pub mod rng;
pub mod train;

pub use autodiff::Tensor;
pub use config::{Ablation, ArchConfig, EvalConfig, RunConfig, SynthConfig, TrainConfig};
pub use data::SeriesSet;
pub use error::{Error, Result};
pub use model::Bundle;
