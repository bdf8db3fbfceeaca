//! Low bit-depth spectral-domain OCT toolkit.
//!
//! The crate covers the full experimental chain for studying how ADC bit
//! depth degrades OCT B-scans:
//!
//! ```text
//! phantom -> 12-bit fringes -> requantize(N) -> background removal
//!         -> k-linearization -> dispersion compensation -> FFT -> log
//!         -> resize -> paired dataset -> PSNR / MSSSIM / CORR2 report
//! ```
//!
//! Reconstructions produced by an external image-to-image model are consumed
//! through the same 16-bit graymap files the dataset builder writes.

pub mod dataset;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod quantize;
pub mod spectral;

pub use image::GrayImage;
pub use spectral::{KMapping, SpectralFrame};
