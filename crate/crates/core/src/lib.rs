//! Sequence labeling with iterated dilated convolutions, a Bi-LSTM
//! baseline and a linear-chain CRF, on a small reverse-mode autodiff core.

pub mod bench;
pub mod config;
pub mod crf;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod idcnn;
pub mod lstm;
pub mod model;
pub mod optim;
pub mod params;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{Config, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::Model;
pub use params::{GradBuffer, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
