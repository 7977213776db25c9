//! Multi-stage temporal convolutional networks (MS-TCN) for sample-wise
//! classification of multichannel inertial time series.
//!
//! The crate is self-contained: a small dense-tensor core with hand-written
//! backward passes ([`ops`]), the network ([`model`]), the per-stage
//! cross-entropy + truncated-MSE loss ([`loss`]), data handling ([`data`]),
//! training and checkpoints ([`train`], [`checkpoint`]) and count-based
//! evaluation ([`metrics`]).

pub mod checkpoint;
pub mod data;
mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use model::{build_model, count_parameters, receptive_field, ModelConfig, MsTcnNet};
pub use tensor::{ParamTensor, Tensor};
