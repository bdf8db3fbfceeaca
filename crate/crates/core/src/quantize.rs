//! Bit-depth reduction of 12-bit fringes and background removal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{SpectralFrame, NATIVE_BIT_DEPTH};

#[derive(Debug, Error, PartialEq)]
pub enum QuantizeError {
    #[error("target bit depth {0} outside 1..=12")]
    BitDepth(u8),
    #[error("requantization expects a 12-bit frame, got {0}-bit")]
    SourceDepth(u8),
}

/// `floor(I * 2^N / 2^12)` for a single 12-bit code, in integer arithmetic.
pub fn requantize_code(code: u16, bits: u8) -> u16 {
    ((u32::from(code) << bits) >> NATIVE_BIT_DEPTH) as u16
}

/// Simulate an `bits`-bit ADC by truncating native 12-bit codes.
pub fn requantize(frame: &SpectralFrame, bits: u8) -> Result<SpectralFrame, QuantizeError> {
    if !(1..=NATIVE_BIT_DEPTH).contains(&bits) {
        return Err(QuantizeError::BitDepth(bits));
    }
    if frame.bit_depth() != NATIVE_BIT_DEPTH {
        return Err(QuantizeError::SourceDepth(frame.bit_depth()));
    }
    let samples = frame
        .samples()
        .iter()
        .map(|&v| requantize_code(v, bits))
        .collect();
    let out = SpectralFrame::new(
        samples,
        frame.samples_per_aline(),
        frame.num_alines(),
        bits,
        frame.k_grid_tag.clone(),
    )
    .expect("requantized codes fit the target depth");
    Ok(out.with_seeds(frame.seeds))
}

/// Which mean is removed from the raw spectra.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundMode {
    /// Subtract each A-line's own mean over wavenumber.
    #[default]
    PerAline,
    /// Subtract the mean spectrum over all A-lines at each wavenumber.
    MeanSpectrum,
}

/// Floating point spectra with the background removed.
///
/// Stored A-line contiguous like [`SpectralFrame`].
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundSubtractedFrame {
    pub values: Vec<f64>,
    pub samples_per_aline: usize,
    pub num_alines: usize,
    pub source_bit_depth: u8,
    /// The means that were subtracted: one per A-line for
    /// [`BackgroundMode::PerAline`], one per wavenumber sample otherwise.
    pub removed_means: Vec<f64>,
}

impl BackgroundSubtractedFrame {
    pub fn aline(&self, index: usize) -> &[f64] {
        let n = self.samples_per_aline;
        &self.values[index * n..(index + 1) * n]
    }

    pub fn alines(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.samples_per_aline)
    }
}

pub fn subtract_background(frame: &SpectralFrame, mode: BackgroundMode) -> BackgroundSubtractedFrame {
    let n = frame.samples_per_aline();
    let m = frame.num_alines();
    let mut values: Vec<f64> = frame.samples().iter().map(|&v| f64::from(v)).collect();
    let removed_means = match mode {
        BackgroundMode::PerAline => {
            let means: Vec<f64> = values
                .chunks_exact(n)
                .map(|a| a.iter().sum::<f64>() / n as f64)
                .collect();
            for (aline, mean) in values.chunks_exact_mut(n).zip(&means) {
                aline.iter_mut().for_each(|v| *v -= mean);
            }
            means
        }
        BackgroundMode::MeanSpectrum => {
            let mut spectrum = vec![0.0; n];
            for aline in values.chunks_exact(n) {
                spectrum.iter_mut().zip(aline).for_each(|(acc, v)| *acc += v);
            }
            spectrum.iter_mut().for_each(|v| *v /= m as f64);
            for aline in values.chunks_exact_mut(n) {
                aline.iter_mut().zip(&spectrum).for_each(|(v, mean)| *v -= mean);
            }
            spectrum
        }
    };
    BackgroundSubtractedFrame {
        values,
        samples_per_aline: n,
        num_alines: m,
        source_bit_depth: frame.bit_depth(),
        removed_means,
    }
}
