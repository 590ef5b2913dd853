//! Reverse-mode automatic differentiation over `f64` tensors, with the
//! layers needed for DenseNet feature extraction and the fusion head.

mod conv;
pub mod gradcheck;
pub mod ops;
mod params;
mod tensor;

pub use conv::conv2d;
pub use ops::{
    add, add_bias, avg_pool2d, batch_norm, concat_channels, conv_output_size, dense, dropout,
    global_avg_pool, matmul, max_pool2d, mean, mean_rows, mul, mul_rows, relu, reshape, scale,
    sigmoid, softmax, softmax_cross_entropy, sum, BatchNormParams,
};
pub use params::{fan_in_uniform, kaiming_uniform, ForwardCtx, Mode, ParamEntry, ParamStore};
pub use tensor::{Gradients, ParamId, Tensor};
