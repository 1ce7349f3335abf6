//! Sparse convolution toolkit: unified-sparsity CSR kernels, a direct sparse
//! convolution engine, dense baselines, evolutionary pruning, quantization and
//! a per-layer benchmark/configurator.

pub mod csr;
pub mod data;
pub mod dense;
pub mod engine;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod pool;
pub mod prune;
pub mod quant;
pub mod shape;
pub mod store;
pub mod tensor;
pub mod timing;

pub use csr::{analyze_sparsity, build_csr, decompress, select_padding_zeros, CsrKernel, SparsityReport};
pub use dense::{conv_dense_direct, conv_dense_gemm, ConvLayerDense};
pub use engine::{conv_sparse, conv_sparse_1d, conv_sparse_auto, tune_sub_batch, EnginePlan, EngineStats, TuneResult};
pub use error::{Error, Result};
pub use half::f16;
pub use shape::{output_shape, ConvShape};
pub use tensor::{max_rel_error, pad_input, DType, Element, Tensor4D};
pub use harness::{Algorithm, BenchOptions, LayerChoice, LayerSpec, NetworkConfig};
pub use model::{Model, Storage};
