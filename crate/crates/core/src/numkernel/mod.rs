//! Dense tensor substrate: forward kernels with analytic backward passes,
//! a finite-difference oracle, seeded randomness and snapshot files.

mod attention;
mod gradcheck;
mod ops;
mod params;
pub mod rng;
pub mod snapshot;
mod tensor;

pub use attention::{attention, attention_backward, AttentionCache};
pub use gradcheck::{finite_diff_check, FdConfig, FdReport, FdWorst};
pub use ops::{
    add_row_bias, affine, affine_backward, conv2d, conv2d_backward, conv_output_size,
    cosine_similarity, gelu, gelu_backward, layer_norm, layer_norm_backward, matmul, matmul_nt,
    matmul_tn, softmax_rows, softmax_rows_backward, sum_rows, AffineGrads, ConvGrads,
    LayerNormCache, LayerNormGrads,
};
pub use params::{GradPair, Grads, ParamStore};
pub use rng::SeededRng;
pub use tensor::{DType, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum KernelError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("non-finite value at flat index {index} of tensor {shape:?}")]
    NonFinite { shape: Vec<usize>, index: usize },
    #[error("objective evaluated to a non-finite value ({0})")]
    NonFiniteObjective(f64),
    #[error("degenerate vector: {0}")]
    Degenerate(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown parameter {0}")]
    MissingParam(String),
    #[error("snapshot format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KernelError>;
