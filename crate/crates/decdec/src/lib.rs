//! Dynamic error compensation for quantized matrix-vector products.
//!
//! A weight matrix is stored in a low-bit base quantization; the
//! quantization residual is kept in a cheap side store and, at each
//! forward step, only the rows matching the largest activation
//! magnitudes are fetched (via a chunked approximate Top-K) and applied
//! as a correction. The crate also ships an analytic transfer-time
//! model for that fetch path and a two-phase tuner that picks per-layer
//! fetch amounts under a latency budget.

pub mod compensation;
pub mod error;
pub mod evaluation;
pub mod hwmodel;
pub mod matrix;
pub mod quantizer;
pub mod selection;
pub mod synth;
pub mod tuner;

pub use compensation::{dec_gemv, decdec_forward, gemv, output_mse, OutputVector};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use quantizer::{base_quantize, residual_quantize, QuantizedResidual, WeightSet};
pub use selection::{
    approx_topk, derive_boundaries, exact_topk, ActivationTrace, BucketBoundaries, Selection,
};
