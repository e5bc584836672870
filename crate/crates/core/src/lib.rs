//! Desk-scale laboratory for studying data-poisoning backdoors in a tiny
//! vision-language model: a reverse-mode tensor engine, a synthetic
//! shape-scene corpus, trigger/target poisoning, the model itself, two-phase
//! training, caption/VQA metrics, and gradient attribution probes.
//!
//! All numerics are generic over [`scalar::Scalar`]; the lab pipeline runs
//! in f32 (see the aliases below) while test oracles may instantiate f64.

pub mod adam;
pub mod dataset;
pub mod poison;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;

pub use rng::Rng;
pub use scalar::Scalar;

/// Production precision of the lab pipeline.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tape::Tape<f32>;
