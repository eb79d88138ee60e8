//! Numerics, network model, training and datasets for sparsity-predicting feedforward networks.

pub mod checkpoint;
pub mod data;
pub mod model;
pub mod numerics;
pub mod train;

pub use data::{Dataset, SynthSpec};
pub use model::fx::{forward_fx_golden, quantize_network, InferenceMode, QuantizedNetwork};
pub use model::{forward_dense, forward_gated, NetworkParams, NetworkSpec, PredictorMask};
pub use numerics::{DenseMatrix, FxScalar, QFormat, WideAccumulator};
pub use train::{HyperParams, PredictorMode, TrainReport};
