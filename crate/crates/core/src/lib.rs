//! Illuminant estimation from predicted per-pixel kernel fields.
//!
//! A small encoder-decoder network predicts, for every pixel of a downsampled
//! input, a 3×3 bank of K×K kernels. Applying the bank to the input yields a
//! reference image; the ratio reference / input is a local gain map that is
//! clustered and fitted with a downhill simplex to produce one or two
//! illuminants. Kernel weights also yield a confidence measure.
//!
//! Module map:
//!
//! - [`color`]: linear images, illuminants, gains, angular distance, sRGB curve
//! - [`image_io`]: 16-bit PPM / PNG input, PPM / PGM output
//! - [`classical`]: white patch, gray world, shades of gray, gray edge
//! - [`kernel`]: kernel fields, their application, penalty and gain maps
//! - [`net`]: the toy network, loss, Adam, augmentation, checkpoints
//! - [`confidence`]: per-channel, uniform and R/B confidence, level quantization
//! - [`fitting`]: Nelder–Mead gain fitting, global and per-cluster
//! - [`cluster`]: spectral clustering of gain maps
//! - [`pipeline`]: end-to-end estimation from a checkpoint
//! - [`eval`]: datasets, ingestion, synthetic scenes, error statistics
//! - [`resample`]: area resize and bilinear sampling

pub mod classical;
pub mod cluster;
pub mod color;
pub mod confidence;
pub mod error;
pub mod eval;
pub mod fitting;
pub mod image_io;
pub mod kernel;
pub mod net;
pub mod pipeline;
pub mod resample;
pub mod rng;

pub use color::{
    angular_distance, apply_diagonal, gains_from_illuminant, srgb_transfer, GainTriple,
    IlluminantVector, LinearImage,
};
pub use error::{Error, Result};
