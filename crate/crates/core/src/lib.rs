//! Q-realign workbench: safety-alignment recovery via dual-objective
//! post-training quantization, demonstrated end to end on a self-contained
//! toy transformer.
//!
//! The crate is organized around the pipeline stages:
//!
//! * [`tensor`] / [`tape`] — dense fp64 tensors and reverse-mode
//!   differentiation with straight-through rules for rounding and clamping.
//! * [`corpus`] / [`model`] — a synthetic alignment scenario and the minimal
//!   decoder-only transformer it trains.
//! * [`quant`] — asymmetric fake quantization with learnable channel-wise
//!   smoothing and learnable clipping.
//! * [`probe`] — per-layer sparse logistic regression probes separating
//!   benign from malicious activations.
//! * [`metrics`] — Fisher separability, refusal detection and rates, PCA
//!   projection export.
//! * [`calib`] — the dual-objective (reconstruction + re-separation)
//!   block-wise calibration loop.
//! * [`formats`] / [`config`] / [`manifest`] / [`scenario`] / [`cli`] —
//!   artifact persistence, run configuration, and the command-line pipeline.

pub mod calib;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod probe;
pub mod qmodel;
pub mod quant;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

