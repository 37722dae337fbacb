//! Minimal tensor layers with hand-written backward passes.

mod batchnorm;
mod conv;
mod ops;
mod tensor;

pub use batchnorm::{BatchNorm2d, BnCache};
pub use conv::Conv2d;
pub use ops::{
    concat_channels, max_pool2, max_pool2_backward, relu_backward_inplace, relu_inplace,
    split_channels, upsample_nearest2, upsample_nearest2_backward,
};
pub use tensor::Tensor;
