//! Simultaneous motion-compensated denoising and sub-pixel displacement
//! estimation for spectral-domain OCT elastography.
//!
//! The processing chain: reconstruct B-scans from spectral interferograms
//! (plain inverse FFT or ISAM refocusing via a gridding NUFFT), estimate
//! dense sub-pixel displacement between temporal frames with multi-pass
//! normalized cross-correlation block matching, materialize each field as a
//! sparse bilinear warp operator with exact adjoint, collaboratively denoise
//! the motion-compensated stack in a separable 4D transform, unwarp through
//! the adjoint, and re-estimate displacement on the cleaned frames.
//!
//! Synthetic speckle phantoms with machine-exact ground truth back every
//! stage; see [`phantom`].

pub mod analysis;
pub mod cli;
pub mod config;
pub mod denoise;
pub mod error;
pub mod fft;
pub mod flow;
pub mod metrics;
pub mod nufft;
pub mod phantom;
pub mod pipeline;
pub mod raster;
pub mod rasterfile;
pub mod recon;
pub mod warp;

pub use error::{Error, Result};
