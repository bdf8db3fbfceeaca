//! Spectral-domain OCT processing chain.
//!
//! ```text
//! background removal -> k-linearization -> dispersion compensation
//!     -> apodization + FFT -> 20 log10 display window -> resize
//! ```
//!
//! Every stage works A-line by A-line; frames are stored A-line contiguous
//! and B-scans row-major with rows indexing depth.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{GrayImage, ImageError};
use crate::quantize::{subtract_background, BackgroundMode, BackgroundSubtractedFrame};
use crate::spectral::{KMapping, SpectralFrame, NATIVE_BIT_DEPTH};

/// Offset inside the logarithm keeping zero magnitude finite.
pub const LOG_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("k-mapping {0} is not strictly monotone over the acquired band")]
    NonMonotone(String),
    #[error("display window floor {floor_db} dB must be below ceiling {ceil_db} dB")]
    Window { floor_db: f64, ceil_db: f64 },
    #[error("frame of {got} samples per a-line, expected an even count >= 2")]
    Samples { got: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    #[default]
    Linear,
    /// Catmull-Rom cubic.
    Cubic,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Apodization {
    None,
    #[default]
    Hann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Acquisition mapping from sample index to wavenumber; spectra are
    /// resampled onto the uniform grid spanning the same band.
    pub k_mapping: KMapping,
    pub interpolation: Interpolation,
    pub background: BackgroundMode,
    /// Express N-bit codes on the 12-bit scale (`x 2^(12-N)`) before the
    /// transform, so every depth shares one full-scale reference.
    pub native_scale: bool,
    /// Phase applied during compensation is
    /// `exp(i (a2 (k - k0)^2 + a3 (k - k0)^3))`; a dispersion of `(a2, a3)`
    /// in the optics is cancelled by `(-a2, -a3)` here.
    pub dispersion_a2: f64,
    pub dispersion_a3: f64,
    pub apodization: Apodization,
    pub log_floor_db: f64,
    pub log_ceil_db: f64,
    /// `(height, width)`; `None` keeps the native `n/2 x alines` size.
    pub resize_target: Option<(usize, usize)>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_mapping: KMapping::default(),
            interpolation: Interpolation::Linear,
            background: BackgroundMode::PerAline,
            native_scale: true,
            dispersion_a2: 0.0,
            dispersion_a3: 0.0,
            apodization: Apodization::Hann,
            log_floor_db: 20.0,
            log_ceil_db: 70.0,
            resize_target: Some((256, 256)),
        }
    }
}

impl PipelineConfig {
    /// Chain matched to the given acquisition optics.
    pub fn matched(optics: &crate::phantom::OpticsConfig) -> Self {
        Self {
            k_mapping: optics.k_mapping.clone(),
            dispersion_a2: -optics.dispersion_a2,
            dispersion_a3: -optics.dispersion_a3,
            ..Self::default()
        }
    }

    pub fn with_window(mut self, window: DisplayWindow) -> Self {
        self.log_floor_db = window.floor_db;
        self.log_ceil_db = window.ceil_db;
        self
    }

    pub fn window(&self) -> DisplayWindow {
        DisplayWindow {
            floor_db: self.log_floor_db,
            ceil_db: self.log_ceil_db,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.log_floor_db < self.log_ceil_db) {
            return Err(PipelineError::Window {
                floor_db: self.log_floor_db,
                ceil_db: self.log_ceil_db,
            });
        }
        if let Some((h, w)) = self.resize_target {
            if h == 0 || w == 0 {
                return Err(ImageError::Target(h, w).into());
            }
        }
        Ok(())
    }
}

/// dB range mapped onto `[0, 1]` by [`log_compress`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisplayWindow {
    pub floor_db: f64,
    pub ceil_db: f64,
}

impl DisplayWindow {
    /// Window whose ceiling is the given percentile of all magnitudes in dB
    /// and whose floor sits `dynamic_range_db` below it.
    pub fn calibrate<'a>(
        magnitudes: impl IntoIterator<Item = &'a DepthMagnitude>,
        percentile: f64,
        dynamic_range_db: f64,
    ) -> Option<Self> {
        let mut db: Vec<f64> = magnitudes
            .into_iter()
            .flat_map(|m| m.values.iter().map(|&v| to_db(v)))
            .collect();
        if db.is_empty() {
            return None;
        }
        let rank = ((percentile / 100.0) * (db.len() - 1) as f64).round() as usize;
        let rank = rank.min(db.len() - 1);
        let (_, ceil, _) = db.select_nth_unstable_by(rank, f64::total_cmp);
        let ceil_db = *ceil;
        Some(Self {
            floor_db: ceil_db - dynamic_range_db,
            ceil_db,
        })
    }
}

/// Complex spectra, A-line contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexFrame {
    pub values: Vec<Complex64>,
    pub samples_per_aline: usize,
    pub num_alines: usize,
    pub source_bit_depth: u8,
}

impl ComplexFrame {
    pub fn aline(&self, index: usize) -> &[Complex64] {
        let n = self.samples_per_aline;
        &self.values[index * n..(index + 1) * n]
    }
}

/// Linear depth magnitudes, A-line contiguous: `values[aline * depth_bins + z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMagnitude {
    pub values: Vec<f64>,
    pub depth_bins: usize,
    pub num_alines: usize,
    pub source_bit_depth: u8,
}

impl DepthMagnitude {
    pub fn aline(&self, index: usize) -> &[f64] {
        &self.values[index * self.depth_bins..(index + 1) * self.depth_bins]
    }

    /// Depth bin of the strongest response, ignoring bins shallower than `min_bin`.
    pub fn peak_depth(&self, aline: usize, min_bin: usize) -> usize {
        let line = self.aline(aline);
        (min_bin..self.depth_bins)
            .max_by(|&a, &b| line[a].total_cmp(&line[b]))
            .unwrap_or(min_bin)
    }
}

/// Display-normalized log-magnitude image.
#[derive(Debug, Clone, PartialEq)]
pub struct BScan {
    pub image: GrayImage,
    pub bit_depth: u8,
    pub window: DisplayWindow,
}

impl BScan {
    pub fn resize(&self, height: usize, width: usize) -> Result<Self, ImageError> {
        Ok(Self {
            image: self.image.resize(height, width)?,
            ..self.clone()
        })
    }
}

fn interpolate(line: &[f64], x: f64, method: Interpolation) -> f64 {
    let last = line.len() - 1;
    let i = x.floor() as usize;
    let t = x - i as f64;
    if t == 0.0 {
        return line[i];
    }
    let at = |idx: isize| line[idx.clamp(0, last as isize) as usize];
    let i = i as isize;
    match method {
        Interpolation::Linear => at(i) + (at(i + 1) - at(i)) * t,
        Interpolation::Cubic => {
            let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
            let t2 = t * t;
            let t3 = t2 * t;
            0.5 * (2.0 * p1
                + (p2 - p0) * t
                + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2
                + (3.0 * (p1 - p2) + p3 - p0) * t3)
        }
    }
}

/// Resample every A-line onto the uniform wavenumber grid.
pub fn k_linearize(
    frame: &BackgroundSubtractedFrame,
    config: &PipelineConfig,
) -> Result<BackgroundSubtractedFrame, PipelineError> {
    let n = frame.samples_per_aline;
    let mapping = &config.k_mapping;
    if !mapping.is_strictly_monotone(n) {
        return Err(PipelineError::NonMonotone(mapping.tag()));
    }
    if mapping.is_linear() {
        return Ok(frame.clone());
    }
    let positions: Vec<f64> = (0..n)
        .map(|j| mapping.inverse(mapping.uniform_k(j, n), n))
        .collect();
    let mut values = Vec::with_capacity(frame.values.len());
    for line in frame.alines() {
        values.extend(
            positions
                .iter()
                .map(|&x| interpolate(line, x, config.interpolation)),
        );
    }
    Ok(BackgroundSubtractedFrame {
        values,
        ..frame.clone()
    })
}

struct FftPair {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl FftPair {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }
}

/// Analytic signal of a real sequence: one-sided spectrum, inverse FFT.
///
/// The real part reproduces the input; the imaginary part is its
/// quadrature (discrete Hilbert transform).
pub fn analytic_signal(line: &[f64]) -> Vec<Complex64> {
    analytic_signal_with(line, &FftPair::new(line.len()))
}

fn analytic_signal_with(line: &[f64], ffts: &FftPair) -> Vec<Complex64> {
    let n = line.len();
    let mut buf: Vec<Complex64> = line.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    ffts.forward.process(&mut buf);
    let half = n / 2;
    for (f, v) in buf.iter_mut().enumerate() {
        let gain = if f == 0 || (n % 2 == 0 && f == half) {
            1.0
        } else if f < n.div_ceil(2) {
            2.0
        } else {
            0.0
        };
        *v *= gain / n as f64;
    }
    ffts.inverse.process(&mut buf);
    buf
}

/// Unit-modulus dispersion correction `exp(i (a2 dk^2 + a3 dk^3))` on the
/// uniform grid.
pub fn dispersion_correction(config: &PipelineConfig, n: usize) -> Vec<Complex64> {
    let mapping = &config.k_mapping;
    let k0 = mapping.center_k(n);
    (0..n)
        .map(|j| {
            let dk = mapping.uniform_k(j, n) - k0;
            let phase = config.dispersion_a2 * dk * dk + config.dispersion_a3 * dk * dk * dk;
            Complex64::from_polar(1.0, phase)
        })
        .collect()
}

/// Analytic signal of each k-linear A-line multiplied by the dispersion
/// correction phase.
pub fn compensate_dispersion(frame: &BackgroundSubtractedFrame, config: &PipelineConfig) -> ComplexFrame {
    let n = frame.samples_per_aline;
    let ffts = FftPair::new(n);
    let correction = dispersion_correction(config, n);
    let apply = config.dispersion_a2 != 0.0 || config.dispersion_a3 != 0.0;
    let mut values = Vec::with_capacity(frame.values.len());
    for line in frame.alines() {
        let mut analytic = analytic_signal_with(line, &ffts);
        if apply {
            analytic.iter_mut().zip(&correction).for_each(|(v, c)| *v *= c);
        }
        values.extend(analytic);
    }
    ComplexFrame {
        values,
        samples_per_aline: n,
        num_alines: frame.num_alines,
        source_bit_depth: frame.source_bit_depth,
    }
}

pub fn window(kind: Apodization, n: usize) -> Vec<f64> {
    match kind {
        Apodization::None => vec![1.0; n],
        Apodization::Hann => (0..n)
            .map(|s| 0.5 - 0.5 * (2.0 * PI * s as f64 / n as f64).cos())
            .collect(),
    }
}

/// Unitary DFT (`1/sqrt(n)` scaling) of one windowed complex A-line, all bins.
///
/// Uses the `exp(-i 2 pi s z / n)` kernel so a fringe `exp(+i 2 pi s z / n)`
/// (the positive-frequency half kept by [`analytic_signal`]) lands on bin `z`.
pub fn full_depth_transform(line: &[Complex64], apodization: Apodization) -> Vec<Complex64> {
    let n = line.len();
    let fft = FftPlanner::new().plan_fft_forward(n);
    depth_transform_with(line, &window(apodization, n), fft.as_ref())
}

fn depth_transform_with(line: &[Complex64], window: &[f64], fft: &dyn Fft<f64>) -> Vec<Complex64> {
    let scale = 1.0 / (line.len() as f64).sqrt();
    let mut buf: Vec<Complex64> = line
        .iter()
        .zip(window)
        .map(|(v, w)| v * (w * scale))
        .collect();
    fft.process(&mut buf);
    buf
}

/// Magnitudes of the first `n/2` depth bins of every A-line.
pub fn transform_to_depth(frame: &ComplexFrame, config: &PipelineConfig) -> DepthMagnitude {
    let n = frame.samples_per_aline;
    let half = n / 2;
    let fft = FftPlanner::new().plan_fft_forward(n);
    let win = window(config.apodization, n);
    let mut values = Vec::with_capacity(half * frame.num_alines);
    for a in 0..frame.num_alines {
        let spectrum = depth_transform_with(frame.aline(a), &win, fft.as_ref());
        values.extend(spectrum[..half].iter().map(|v| v.norm()));
    }
    DepthMagnitude {
        values,
        depth_bins: half,
        num_alines: frame.num_alines,
        source_bit_depth: frame.source_bit_depth,
    }
}

pub fn to_db(magnitude: f64) -> f64 {
    20.0 * (magnitude + LOG_EPSILON).log10()
}

/// Map magnitudes through `20 log10` and the display window onto `[0, 1]`.
///
/// The result is depth rows by A-line columns, before any resize.
pub fn log_compress(mag: &DepthMagnitude, window: DisplayWindow) -> BScan {
    let span = window.ceil_db - window.floor_db;
    let image = GrayImage::from_fn(mag.depth_bins, mag.num_alines, |z, a| {
        let d = to_db(mag.values[a * mag.depth_bins + z]);
        ((d - window.floor_db) / span).clamp(0.0, 1.0)
    });
    BScan {
        image,
        bit_depth: mag.source_bit_depth,
        window,
    }
}

/// Everything up to and including the depth transform.
pub fn frame_to_magnitude(
    frame: &SpectralFrame,
    config: &PipelineConfig,
) -> Result<DepthMagnitude, PipelineError> {
    let n = frame.samples_per_aline();
    if n < 2 || n % 2 != 0 {
        return Err(PipelineError::Samples { got: n });
    }
    let mut background_free = subtract_background(frame, config.background);
    if config.native_scale && frame.bit_depth() < NATIVE_BIT_DEPTH {
        let gain = f64::from(1u32 << (NATIVE_BIT_DEPTH - frame.bit_depth()));
        background_free.values.iter_mut().for_each(|v| *v *= gain);
        background_free.removed_means.iter_mut().for_each(|v| *v *= gain);
    }
    let linear = k_linearize(&background_free, config)?;
    let compensated = compensate_dispersion(&linear, config);
    Ok(transform_to_depth(&compensated, config))
}

/// Full chain from raw fringes to a display-normalized, resized B-scan.
pub fn process_frame(frame: &SpectralFrame, config: &PipelineConfig) -> Result<BScan, PipelineError> {
    config.validate()?;
    let magnitude = frame_to_magnitude(frame, config)?;
    let bscan = log_compress(&magnitude, config.window());
    match config.resize_target {
        Some((h, w)) => Ok(bscan.resize(h, w)?),
        None => Ok(bscan),
    }
}
