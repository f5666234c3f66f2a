//! adalayer: a desk-scale laboratory for token-adaptive layer execution.
//!
//! A small residual MLP decides, per token and per layer, whether to run the
//! layer or skip it. Routers are trained with Gumbel noise and a
//! straight-through relaxation under a rate constraint, optionally with an
//! entropy bonus that keeps decisions non-saturated. Post-training weight
//! compression (groupwise quantization, magnitude pruning) perturbs the
//! decisions; a threshold search recalibrates the execute/bypass cutoff.
//! Metrics cover execution ratios, decision flipping, logit-gap histograms,
//! routing drift between models, and exact FLOP accounting.

pub mod backward;
pub mod calibrate;
pub mod checkpoint;
pub mod error;
pub mod fileio;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod quant;
pub mod report;
pub mod rng;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
