//! Adversarial-robustness workbench.
//!
//! Small full-precision and quantized models (logistic regression, a
//! two-hidden-layer MLP, a three-layer CNN) trained by a deterministic
//! loop, attacked with FGSM, random-start PGD, constant pixel offsets and
//! non-example gradient ascent, and evaluated into CSV/PGM/JSON artifacts.

pub mod attacks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod graph;
pub mod models;
pub mod quantization;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use attacks::{AttackConfig, AttackKind};
pub use checkpoint::Checkpoint;
pub use data::Dataset;
pub use graph::{Graph, NodeId, Padding};
pub use models::{ModelConfig, ModelKind, ParamSet};
pub use quantization::QuantSpec;
pub use rng::Rng;
pub use tensor::{Real, Tensor};
pub use training::{TrainConfig, TrainLog};
