//! Normalized activation functions with dynamic variance statistics,
//! a minimal reverse-mode autodiff engine, trainable layers, and the
//! quadrature-based analysis toolkit used to verify the variance
//! propagation claims at desk scale.

pub mod activations;
pub mod error;
pub mod normact;
pub mod tensor;

pub use activations::{act_derivative, act_eval, ActivationKind};
pub use error::{Error, Result};
pub use normact::{
    batch_statistics, lambda_factor, ActivationStats, NormActConfig, NormActLayer, RunningStats,
    StatsSnapshot,
};
pub use tensor::tape::{BnLayout, Tape, VarId};
pub use tensor::{reduce_moments, BoolMask, Tensor};
