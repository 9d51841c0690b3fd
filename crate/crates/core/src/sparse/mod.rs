//! Sparse 3D tensors and the gather-GEMM-scatter convolution engine.

pub mod checkpoint;
pub mod conv;
pub mod dense;
pub mod ops;
pub mod rulebook;
pub mod tensor;

pub use checkpoint::{TensorContainer, TensorEntry};
pub use conv::{
    inverse_conv, inverse_conv_backward, sparse_conv_backward, sparse_conv_forward, ConvGrads,
    ConvParams,
};
pub use dense::{
    dense_conv_oracle, dense_transposed_conv_oracle, densify, sparsify, DenseTensor, OracleMode,
};
pub use ops::{
    add, batch_norm, batch_norm_backward, concat_features, leaky_relu, leaky_relu_backward,
    BatchNormCache, NormParams, BN_EPSILON, BN_MOMENTUM, LEAKY_SLOPE,
};
pub use rulebook::{build_rulebook, kernel_offsets, ConvMode, KernelSpec, Rulebook};
pub use tensor::{Coord, SparseTensor};
