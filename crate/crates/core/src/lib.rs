//! Software simulation of MXFP4 (block-scaled 4-bit float) training numerics.
//!
//! Blocks of up to 32 FP4 codes share one signed power-of-two scale. On top
//! of the codec this crate provides quantized linear-layer forward/backward
//! passes with unbiased stochastic gradients, weight-oscillation diagnostics,
//! an EMA-guided weight quantizer, and a per-element update-amplification
//! optimizer wrapper.

pub mod block;
pub mod container;
pub mod diagnostics;
pub mod ema;
pub mod error;
pub mod format;
pub mod linear;
pub mod matrix;
pub mod qmatrix;
pub mod ramping;
pub mod rng;
pub mod round;
pub mod scale;

pub use block::{quantize_block, MxBlock, BLOCK_LEN, BLOCK_WIRE_BYTES};
pub use error::{MxError, Result};
pub use format::{bracket, Fp4Code, Fp4Format};
pub use matrix::Matrix;
pub use qmatrix::{dequantize_matrix, mx_matmul, quantize_matrix, GroupAxis, QuantizedMatrix};
pub use rng::{DetRng, QuantStream};
pub use round::{round_deterministic, round_stochastic, Rounding};
pub use scale::{
    compute_scale, compute_scale_microscaling, compute_scale_truncation_free, MxScale, ScaleRule,
};
