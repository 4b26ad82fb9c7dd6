//! Forward kernels on plain tensors. Differentiable versions live in
//! [`crate::autodiff`] and call into these.

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod shape;

pub use conv::{avg_pool2d, conv2d, separable_conv2d, ConvGeometry, SEPARABLE_KERNELS};
pub use elementwise::{add, l1_loss, relu, scale, sum, weighted_sum};
pub use linalg::{kept_count, matmul, matmul_bt, matmul_ex, rank_row, softmax_rows, top_k_mask};
pub use norm::{layer_norm, LAYER_NORM_EPS};
pub use shape::{concat_channels, global_avg_channels, pixel_shuffle, pixel_unshuffle, slice_channels};

pub(crate) use conv::{avg_pool2d_backward, conv2d_backward};
pub(crate) use linalg::{matmul_backward, softmax_rows_backward, top_k_mixture, top_k_mixture_backward};
pub(crate) use norm::{layer_norm_backward, layer_norm_forward};
