//! Desk-scale convolutional classifier.
//!
//! Layers are described declaratively by an [`ArchSpec`]; a [`Network`] holds the
//! tensors and runs forward and backward passes in either 32-bit (training) or
//! 64-bit (gradient checking) precision. [`ModelParams`] adds the seed, training
//! metadata and per-layer transfer flags that [`replace_head`] sets, and
//! [`save_params`]/[`load_params`] persist it in a checksummed binary format.

pub mod arch;
pub mod error;
pub mod io;
pub mod network;
pub mod params;
pub mod train;

pub use arch::{ArchSpec, LayerSpec, Shape};
pub use error::{NnError, Result};
pub use io::{decode_params, encode_params, load_params, save_params};
pub use network::{BatchGradients, ExampleBackprop, Gradients, LayerParams, Network, Scalar};
pub use params::{replace_head, ModelParams, TrainingMeta};
pub use train::{train, Example, LogRecord, StepStats, TrainConfig, TrainFailure, TrainLog, Trainer};
