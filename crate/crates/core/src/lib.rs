//! Spectral-codebook guided single-image reflection removal.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`nn`], [`autodiff`], [`params`], [`optim`] and
//!   [`gradcheck`] form the numeric substrate.
//! - [`codebook`] holds the band-wise quantized spectral prior.
//! - [`refine`] implements spatial sorting and diagonal band re-scaling.
//! - [`saformer`] is the spectrum-aware transformer block.
//! - [`pipeline`] assembles the removal network, its losses and training.
//! - [`synth`], [`metrics`], [`cube_io`] and [`checkpoint`] cover data,
//!   evaluation and persistence; [`config`] is the run configuration.

pub mod autodiff;
pub mod checkpoint;
pub mod codebook;
pub mod config;
pub mod cube_io;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod refine;
pub mod saformer;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Scalar, Tensor};

/// Number of spectral bands (400 to 710 nm in 10 nm steps).
pub const BANDS: usize = 31;

/// Deterministic generator for `(seed, stream)`, e.g. one stream per
/// training step or per generated sample.
pub fn stream_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
