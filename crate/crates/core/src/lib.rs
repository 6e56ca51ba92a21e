//! Two-step post-training weight quantization.
//!
//! Weights are first quantized linearly to an intermediate bit-width, then a
//! subset of the intermediate integer grid that forms a binary-coding tree is
//! retained and the linear scale is re-searched. The result is compensated
//! column by column through the inverse calibration Hessian and finally fused
//! into pure binary-coding coefficients that a lookup-table kernel can execute.
//!
//! Module map:
//!
//! - [`tensor_store`]: GQTF tensor files and deterministic synthetic data.
//! - [`calib_stats`]: proxy Hessian accumulation, damping, inverse factor.
//! - [`quant_core`]: per-row quantization math and parameter search.
//! - [`gptq_engine`]: layer driver with Hessian error compensation.
//! - [`fuse_pack`]: fused binary-coding rows and the GQTQ packed format.
//! - [`bc_gemm`]: LUT matvec kernel, reference paths and benchmark harness.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bc_gemm;
pub mod calib_stats;
pub mod error;
pub mod fuse_pack;
pub mod gptq_engine;
pub mod quant_core;
pub mod rng;
pub mod tensor_store;

pub use error::{Error, Result};
pub use tensor_store::TensorF32;
