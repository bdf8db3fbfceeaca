//! Raw spectral frames and the sample-index to wavenumber mapping.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Native ADC depth of synthesized fringes.
pub const NATIVE_BIT_DEPTH: u8 = 12;

/// Largest code of the native ADC, `2^12 - 1`.
pub const NATIVE_FULL_SCALE: u16 = (1 << NATIVE_BIT_DEPTH) - 1;

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("bit depth {0} outside 1..=12")]
    BitDepth(u8),
    #[error("frame shape {samples}x{alines} does not match {len} samples")]
    Shape {
        samples: usize,
        alines: usize,
        len: usize,
    },
    #[error("sample {value} at a-line {aline}, index {index} exceeds {max} for a {bit_depth}-bit frame")]
    Range {
        value: u16,
        aline: usize,
        index: usize,
        max: u16,
        bit_depth: u8,
    },
    #[error("invalid k-grid tag {0:?}")]
    Tag(String),
}

/// Seeds that produced a synthesized frame; carried into file headers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSeeds {
    pub phantom: u64,
    pub noise: u64,
}

/// One B-frame of raw interferograms.
///
/// Samples are stored A-line contiguous: `samples[aline * samples_per_aline + s]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpectralFrame {
    samples: Vec<u16>,
    samples_per_aline: usize,
    num_alines: usize,
    bit_depth: u8,
    pub k_grid_tag: String,
    pub seeds: FrameSeeds,
}

impl SpectralFrame {
    pub fn new(
        samples: Vec<u16>,
        samples_per_aline: usize,
        num_alines: usize,
        bit_depth: u8,
        k_grid_tag: impl Into<String>,
    ) -> Result<Self, FrameError> {
        if !(1..=NATIVE_BIT_DEPTH).contains(&bit_depth) {
            return Err(FrameError::BitDepth(bit_depth));
        }
        if samples.len() != samples_per_aline * num_alines || samples.is_empty() {
            return Err(FrameError::Shape {
                samples: samples_per_aline,
                alines: num_alines,
                len: samples.len(),
            });
        }
        let max = max_code(bit_depth);
        if let Some(pos) = samples.iter().position(|&v| v > max) {
            return Err(FrameError::Range {
                value: samples[pos],
                aline: pos / samples_per_aline,
                index: pos % samples_per_aline,
                max,
                bit_depth,
            });
        }
        Ok(Self {
            samples,
            samples_per_aline,
            num_alines,
            bit_depth,
            k_grid_tag: k_grid_tag.into(),
            seeds: FrameSeeds::default(),
        })
    }

    pub fn with_seeds(mut self, seeds: FrameSeeds) -> Self {
        self.seeds = seeds;
        self
    }

    pub fn samples(&self) -> &[u16] {
        &self.samples
    }

    pub fn samples_per_aline(&self) -> usize {
        self.samples_per_aline
    }

    pub fn num_alines(&self) -> usize {
        self.num_alines
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn aline(&self, index: usize) -> &[u16] {
        let n = self.samples_per_aline;
        &self.samples[index * n..(index + 1) * n]
    }

    pub fn alines(&self) -> impl Iterator<Item = &[u16]> {
        self.samples.chunks_exact(self.samples_per_aline)
    }

    /// Sample at wavenumber index `s` of A-line `aline`.
    pub fn get(&self, s: usize, aline: usize) -> u16 {
        self.samples[aline * self.samples_per_aline + s]
    }
}

/// Largest representable code at `bit_depth` bits.
pub fn max_code(bit_depth: u8) -> u16 {
    ((1u32 << bit_depth) - 1) as u16
}

/// Polynomial mapping from sample index to wavenumber.
///
/// `k(s) = pi * sum_m coeffs[m] * (s / n)^m` for a spectrum of `n` samples.
/// The identity mapping `[0, 1]` puts a reflector at depth `z` (in pixels) on
/// a fringe `cos(2 k z)` whose FFT peaks at bin `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMapping {
    pub coeffs: Vec<f64>,
}

impl Default for KMapping {
    /// Mild quadratic warp: `k = pi * (1.1 u - 0.1 u^2)`.
    fn default() -> Self {
        Self::quadratic(0.1)
    }
}

impl KMapping {
    pub fn linear() -> Self {
        Self {
            coeffs: vec![0.0, 1.0],
        }
    }

    /// `u + q * u * (1 - u)`: fixes both ends of the band and is strictly
    /// increasing on `[0, 1]` for `|q| < 1`.
    pub fn quadratic(q: f64) -> Self {
        Self {
            coeffs: vec![0.0, 1.0 + q, -q],
        }
    }

    pub fn is_linear(&self) -> bool {
        let trimmed = self.trimmed();
        trimmed.len() == 2 && trimmed[0] == 0.0 && trimmed[1] == 1.0
    }

    fn trimmed(&self) -> &[f64] {
        let mut end = self.coeffs.len();
        while end > 0 && self.coeffs[end - 1] == 0.0 {
            end -= 1;
        }
        &self.coeffs[..end]
    }

    /// Wavenumber at fractional sample index `s` of an `n`-sample spectrum.
    pub fn k_at(&self, s: f64, n: usize) -> f64 {
        let u = s / n as f64;
        PI * self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * u + c)
    }

    /// True when `k(s)` strictly increases over `s = 0..=n`.
    pub fn is_strictly_monotone(&self, n: usize) -> bool {
        (0..n).all(|s| self.k_at((s + 1) as f64, n) > self.k_at(s as f64, n))
    }

    /// Spacing of the uniform grid spanning the same band as the mapping.
    pub fn uniform_step(&self, n: usize) -> f64 {
        (self.k_at(n as f64, n) - self.k_at(0.0, n)) / n as f64
    }

    /// Uniform wavenumber at index `j`.
    pub fn uniform_k(&self, j: usize, n: usize) -> f64 {
        self.k_at(0.0, n) + j as f64 * self.uniform_step(n)
    }

    /// Center of the uniform grid; the expansion point of dispersion phases.
    pub fn center_k(&self, n: usize) -> f64 {
        self.uniform_k(n / 2, n)
    }

    /// Fractional acquisition index whose wavenumber equals `k`.
    ///
    /// Requires a strictly monotone mapping. Values outside the sampled band
    /// are clamped to `[0, n - 1]`.
    pub fn inverse(&self, k: f64, n: usize) -> f64 {
        let last = (n - 1) as f64;
        if k <= self.k_at(0.0, n) {
            return 0.0;
        }
        if k >= self.k_at(last, n) {
            return last;
        }
        let (mut lo, mut hi) = (0.0, last);
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if self.k_at(mid, n) < k {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let s = 0.5 * (lo + hi);
        let nearest = s.round();
        if (s - nearest).abs() < 1e-9 {
            nearest
        } else {
            s
        }
    }

    /// Textual identifier stored in fringe headers, e.g. `poly:0,1.1,-0.1`.
    pub fn tag(&self) -> String {
        self.to_string()
    }

    pub fn from_tag(tag: &str) -> Result<Self, FrameError> {
        let body = tag
            .strip_prefix("poly:")
            .ok_or_else(|| FrameError::Tag(tag.to_string()))?;
        let coeffs = body
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| FrameError::Tag(tag.to_string()))?;
        if coeffs.is_empty() || coeffs.iter().any(|c| !c.is_finite()) {
            return Err(FrameError::Tag(tag.to_string()));
        }
        Ok(Self { coeffs })
    }
}

impl fmt::Display for KMapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "poly:")?;
        for (i, c) in self.coeffs.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_rejects_out_of_range_sample() {
        let err = SpectralFrame::new(vec![0, 8], 2, 1, 3, "poly:0,1").unwrap_err();
        assert!(matches!(err, FrameError::Range { value: 8, index: 1, .. }));
    }

    #[test]
    fn frame_rejects_bad_shape() {
        assert!(matches!(
            SpectralFrame::new(vec![0; 5], 2, 3, 12, "poly:0,1"),
            Err(FrameError::Shape { .. })
        ));
    }

    #[test]
    fn tag_round_trip() {
        let m = KMapping::default();
        assert_eq!(KMapping::from_tag(&m.tag()).unwrap(), m);
        assert!(KMapping::from_tag("spline:1,2").is_err());
        assert!(KMapping::from_tag("poly:1,x").is_err());
    }

    #[test]
    fn linear_mapping_inverse_is_exact() {
        let m = KMapping::linear();
        for j in 0..64 {
            assert_eq!(m.inverse(m.uniform_k(j, 64), 64), j as f64);
        }
    }

    #[test]
    fn quadratic_mapping_is_monotone_and_invertible() {
        let m = KMapping::default();
        assert!(m.is_strictly_monotone(1024));
        for s in [0.0, 3.25, 511.5, 1000.0] {
            let k = m.k_at(s, 1024);
            assert!((m.inverse(k, 1024) - s).abs() < 1e-9);
        }
        assert!(!KMapping::quadratic(1.5).is_strictly_monotone(1024));
    }
}
