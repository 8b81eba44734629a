//! Joint pruning and low-bit quantization of dense weight matrices with closed-form,
//! Hessian-based error compensation.
//!
//! A layer `W` (`C_out × C_in`) is rotated, masked, and then each row's pruning and
//! quantization error is transferred onto the entries that survive, using the
//! calibration Hessian `H = 2XXᵀ`. Rows are independent and solved in parallel.

pub mod calibration;
pub mod compensation;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod masking;
pub mod matrix;
pub mod pipeline;
pub mod quantizer;
pub mod rotation;
pub mod tensor_store;

pub use calibration::{activation_stats, build_hessian, gen_calibration, ActivationStats, Hessian};
pub use compensation::{prune_compensation, quant_compensation, solve_compensation, RowCompensation, RowPartition};
pub use error::{Error, Result};
pub use evaluation::{compare_baselines, natural_sparsity, reconstruction_error, sparsity_audit, EvalReport};
pub use masking::{build_mask, prune_scores, MaskMetric, Pattern, PruneMask};
pub use matrix::Matrix;
pub use pipeline::{
    compress_matrix, compress_prune_only, compress_quant_only, compress_stack, CompressionResult, Mode,
    PipelineConfig, Propagate,
};
pub use quantizer::{gptq_quantize, quant_error, rtn_quantize, QuantizedMatrix, QuantizerKind, QuantizerSpec};
pub use rotation::{build_rotation, rotate_pair, RotationKind, RotationSpec};
pub use tensor_store::{read_container, write_container, DType, Tensor, TensorContainer};
