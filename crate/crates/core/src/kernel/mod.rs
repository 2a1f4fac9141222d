//! Dense tensors and the differentiable building blocks of the model.
//!
//! There is no autograd tape: every op has an explicit forward and backward
//! function, and the network composes them by hand.

mod activation;
mod adam;
mod conv;
mod dropout;
mod gradcheck;
pub mod layers;
mod linear;
mod scalar;
mod tensor;
pub mod trilinear;

pub use activation::{leaky_relu_bwd, leaky_relu_fwd, LEAKY_SLOPE};
pub(crate) use activation::{leaky_relu_grad_inplace, leaky_relu_inplace};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{conv3d_bwd, conv3d_fwd, conv_out_dim, tconv3d_bwd, tconv3d_fwd, tconv_out_dim, ConvGrads, ConvSpec};
pub use dropout::{apply_mask, dropout_cells};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use layers::{ChainCache, ConvChain, ConvLayer};
pub use linear::{linear_bwd, linear_fwd, LinearGrads};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use trilinear::{trilinear_grid_grad, trilinear_query_grad, trilinear_sample, Stencil};
