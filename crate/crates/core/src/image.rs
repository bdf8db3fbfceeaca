//! Row-major single-channel floating point image.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("image shape {height}x{width} does not match {len} pixels")]
    Shape {
        height: usize,
        width: usize,
        len: usize,
    },
    #[error("resize target {0}x{1} must be positive")]
    Target(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(ImageError::Shape {
                height,
                width,
                len: pixels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("nonzero shape")
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Self::new(height, width, pixels).expect("nonzero shape")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.pixels[row * self.width..(row + 1) * self.width]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Bilinear resampling with pixel-center alignment and edge clamping.
    ///
    /// Output pixel `(r, c)` samples the source at
    /// `((r + 0.5) * h / th - 0.5, (c + 0.5) * w / tw - 0.5)`, so equal sizes
    /// reproduce the source exactly and outputs stay inside the input range.
    pub fn resize(&self, target_height: usize, target_width: usize) -> Result<Self, ImageError> {
        if target_height == 0 || target_width == 0 {
            return Err(ImageError::Target(target_height, target_width));
        }
        if (target_height, target_width) == self.shape() {
            return Ok(self.clone());
        }
        let rows = sample_positions(self.height, target_height);
        let cols = sample_positions(self.width, target_width);
        let mut pixels = Vec::with_capacity(target_height * target_width);
        for &(r0, r1, fr) in &rows {
            for &(c0, c1, fc) in &cols {
                let top = lerp(self.get(r0, c0), self.get(r0, c1), fc);
                let bottom = lerp(self.get(r1, c0), self.get(r1, c1), fc);
                pixels.push(lerp(top, bottom, fr));
            }
        }
        Self::new(target_height, target_width, pixels)
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

/// For each destination index: (lower source index, upper source index, weight).
fn sample_positions(source: usize, target: usize) -> Vec<(usize, usize, f64)> {
    let scale = source as f64 / target as f64;
    let last = (source - 1) as f64;
    (0..target)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = x.floor();
            let hi = (lo + 1.0).min(last);
            (lo as usize, hi as usize, x - lo)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = GrayImage::from_fn(5, 7, |r, c| ((r * 7 + c) as f64 * 0.37).sin().abs());
        let out = img.resize(5, 7).unwrap();
        for (a, b) in img.pixels().iter().zip(out.pixels()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn resize_constant_stays_constant() {
        let out = GrayImage::filled(9, 4, 0.3).resize(17, 3).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn checkerboard_upsample_has_strictly_interior_values() {
        let img = GrayImage::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = img.resize(4, 4).unwrap();
        // Row 1 col 1 samples the source at (0.25, 0.25):
        // 0.75*0.75*0 + 0.75*0.25*1 + 0.25*0.75*1 + 0.25*0.25*0 = 0.375.
        assert!((out.get(1, 1) - 0.375).abs() < 1e-12);
        for r in 1..3 {
            for c in 1..3 {
                let v = out.get(r, c);
                assert!(v > 0.0 && v < 1.0, "({r},{c}) = {v}");
            }
        }
    }

    #[test]
    fn zero_target_rejected() {
        assert!(GrayImage::filled(2, 2, 0.0).resize(0, 2).is_err());
    }

    proptest! {
        #[test]
        fn resize_preserves_unit_range(
            h in 1usize..12, w in 1usize..12, th in 1usize..20, tw in 1usize..20,
            seed in any::<u64>(),
        ) {
            let mut state = seed | 1;
            let img = GrayImage::from_fn(h, w, |_, _| {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                (state % 1001) as f64 / 1000.0
            });
            let out = img.resize(th, tw).unwrap();
            prop_assert!(out.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
