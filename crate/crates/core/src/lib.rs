//! Instance segmentation with a learned shape prior.
//!
//! A localization grid proposes one box per cell, a differentiable spatial
//! transformer crops each box, a VAE whose decoder is frozen maps every crop
//! to a plausible shape mask, and the Sobel maps of those masks are stitched
//! back onto a canvas. Training maximizes the agreement between that canvas
//! and the image's own gradient map.

pub mod detector;
pub mod error;
pub mod gradsuite;
pub mod ndgrad;

pub use error::{Error, Result};
pub mod imgproc;
pub mod metrics;
pub mod pipeline;
pub mod postproc;
pub mod prior;
pub mod rng;
pub mod shapes;
pub mod stn;
