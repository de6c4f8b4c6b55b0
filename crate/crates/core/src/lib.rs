//! Mixed-precision quantized architecture search at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] is a small eager reverse-mode autodiff engine over `f64`.
//! * [`quant`] holds the simulated quantizers (uniform affine with EMA ranges,
//!   symmetric LSQ for weights, BatchQuant for activations).
//! * [`extreme_value`] measures how the expected batch maximum drifts with
//!   the number of elements in a tensor.
//! * [`supernet`] defines the joint architecture / bitwidth search space, its
//!   cardinality, the complexity model and the weight-sharing network.
//! * [`qat`] trains the supernet (sandwich sampling, two-stage elastic
//!   quantization, calibration, ablations) and stores checkpoints.
//! * [`evo`] is NSGA-II over genotypes with an accuracy predictor.

pub mod error;
pub mod evo;
pub mod extreme_value;
pub mod qat;
pub mod quant;
pub mod rng;
pub mod supernet;
pub mod tensor;

pub use error::{QfaError, Result};
