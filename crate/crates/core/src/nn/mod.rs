//! Numeric layers: convolutions, deformable convolution, normalization and
//! channel attention. Each has a standalone forward function plus the
//! backward kernels used by [`crate::autodiff`].

pub mod attention;
pub mod conv;
pub mod deform;
pub mod norm;

pub use attention::{channel_attention, AttentionOutput, HeadLayout};
pub use conv::{conv2d, ConvGeom, ConvSpec};
pub use deform::{bilinear_sample, deformable_conv3x3, DeformableConvSpec, OFFSET_CHANNELS};
pub use norm::{layer_norm, softmax_axis, LAYER_NORM_EPS};
