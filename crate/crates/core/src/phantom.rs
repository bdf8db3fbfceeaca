//! Layered retina-like phantoms and 12-bit spectral interferogram synthesis.
//!
//! A phantom is a list of point reflectors per A-line: a few laterally smooth
//! layers plus uniformly scattered weak reflectors between them, which
//! produce speckle once the fringes are processed.

use std::f64::consts::{LN_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{FrameSeeds, KMapping, SpectralFrame, NATIVE_BIT_DEPTH, NATIVE_FULL_SCALE};

/// Largest lateral step of a layer trace between adjacent A-lines, in pixels.
pub const MAX_LAYER_STEP: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("num_alines must be at least 1")]
    NoALines,
    #[error("samples_per_aline {0} must be a power of two >= 64")]
    SampleCount(usize),
    #[error("layer depth range [{lo}, {hi}] outside the unambiguous range [0, {limit})")]
    DepthRange { lo: f64, hi: f64, limit: f64 },
    #[error("{name} range [{lo}, {hi}] outside [0, 1]")]
    Reflectivity { name: &'static str, lo: f64, hi: f64 },
    #[error("invalid optics: {0}")]
    Optics(String),
    #[error("reflector depth {depth} outside the unambiguous range [0, {limit})")]
    ReflectorDepth { depth: f64, limit: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub num_alines: usize,
    pub samples_per_aline: usize,
    pub num_layers: usize,
    /// Allowed layer depths in pixels, `[lo, hi]`.
    pub layer_depth_range: (f64, f64),
    pub layer_reflectivity_range: (f64, f64),
    /// Weak scatterers per A-line.
    pub speckle_density: usize,
    /// Speckle reflectivities are drawn from `[0, speckle_reflectivity_max]`.
    pub speckle_reflectivity_max: f64,
    pub rng_seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            num_alines: 200,
            samples_per_aline: 1024,
            num_layers: 5,
            layer_depth_range: (80.0, 400.0),
            layer_reflectivity_range: (0.05, 0.4),
            speckle_density: 30,
            speckle_reflectivity_max: 0.04,
            rng_seed: 0,
        }
    }
}

impl PhantomConfig {
    /// Depths must lie in `[0, samples_per_aline / 2)`.
    pub fn depth_limit(&self) -> f64 {
        (self.samples_per_aline / 2) as f64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_alines == 0 {
            return Err(ConfigError::NoALines);
        }
        let n = self.samples_per_aline;
        if n < 64 || !n.is_power_of_two() {
            return Err(ConfigError::SampleCount(n));
        }
        let (lo, hi) = self.layer_depth_range;
        let limit = self.depth_limit();
        if !(lo >= 0.0 && lo <= hi && hi < limit) {
            return Err(ConfigError::DepthRange { lo, hi, limit });
        }
        let (rlo, rhi) = self.layer_reflectivity_range;
        if !(0.0..=1.0).contains(&rlo) || !(0.0..=1.0).contains(&rhi) || rlo > rhi {
            return Err(ConfigError::Reflectivity {
                name: "layer reflectivity",
                lo: rlo,
                hi: rhi,
            });
        }
        if !(0.0..=1.0).contains(&self.speckle_reflectivity_max) {
            return Err(ConfigError::Reflectivity {
                name: "speckle reflectivity",
                lo: 0.0,
                hi: self.speckle_reflectivity_max,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reflector {
    /// Fractional depth in pixels.
    pub depth: f64,
    pub reflectivity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub samples_per_aline: usize,
    /// Reflectors of every A-line; layer reflectors come first, in layer order.
    pub alines: Vec<Vec<Reflector>>,
    /// Layer depth traces, `layers[l][aline]`.
    pub layers: Vec<Vec<f64>>,
}

impl Phantom {
    /// Phantom whose every A-line holds the same reflectors.
    pub fn uniform(samples_per_aline: usize, num_alines: usize, reflectors: &[Reflector]) -> Self {
        Self {
            samples_per_aline,
            alines: vec![reflectors.to_vec(); num_alines],
            layers: Vec::new(),
        }
    }

    pub fn num_alines(&self) -> usize {
        self.alines.len()
    }
}

struct LayerShape {
    base: f64,
    amplitude: f64,
    period: f64,
    phase: f64,
    tilt: f64,
}

impl LayerShape {
    fn depth_at(&self, x: f64) -> f64 {
        self.base + self.tilt * x + self.amplitude * (2.0 * PI * x / self.period + self.phase).sin()
    }
}

pub fn make_phantom(config: &PhantomConfig) -> Result<Phantom, ConfigError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let (lo, hi) = config.layer_depth_range;
    let (rlo, rhi) = config.layer_reflectivity_range;
    let num_alines = config.num_alines;

    let mut bases: Vec<f64> = (0..config.num_layers)
        .map(|_| rng.random_range(lo..=hi))
        .collect();
    bases.sort_by(f64::total_cmp);

    let mut layers = Vec::with_capacity(config.num_layers);
    let mut layer_reflectivity = Vec::with_capacity(config.num_layers);
    for base in bases {
        let period = rng.random_range(0.5..2.0) * num_alines.max(8) as f64;
        // Slope of the sinusoid plus the tilt stays below MAX_LAYER_STEP.
        let tilt = rng.random_range(-0.25..0.25);
        let max_amp = (MAX_LAYER_STEP - 0.25) * period / (2.0 * PI);
        let amplitude = rng.random_range(0.0..=max_amp.min(12.0));
        let shape = LayerShape {
            base,
            amplitude,
            period,
            phase: rng.random_range(0.0..2.0 * PI),
            tilt,
        };
        let center = num_alines as f64 / 2.0;
        layers.push(
            (0..num_alines)
                .map(|j| shape.depth_at(j as f64 - center).clamp(lo, hi))
                .collect::<Vec<_>>(),
        );
        layer_reflectivity.push(rng.random_range(rlo..=rhi));
    }

    let mut alines = Vec::with_capacity(num_alines);
    for j in 0..num_alines {
        let mut reflectors: Vec<Reflector> = layers
            .iter()
            .zip(&layer_reflectivity)
            .map(|(trace, &r)| Reflector {
                depth: trace[j],
                reflectivity: r,
            })
            .collect();
        let (top, bottom) = match (layers.first(), layers.last()) {
            (Some(first), Some(last)) if layers.len() >= 2 => (first[j], last[j]),
            _ => (lo, hi),
        };
        for _ in 0..config.speckle_density {
            let depth = if bottom > top {
                rng.random_range(top..bottom)
            } else {
                top
            };
            reflectors.push(Reflector {
                depth,
                reflectivity: rng.random_range(0.0..=config.speckle_reflectivity_max),
            });
        }
        alines.push(reflectors);
    }

    Ok(Phantom {
        samples_per_aline: config.samples_per_aline,
        alines,
        layers,
    })
}

/// Light source, interferometer and detector model in ADC counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpticsConfig {
    /// Gaussian source envelope center, as a fraction of the band.
    pub envelope_center: f64,
    /// Gaussian FWHM, as a fraction of the band.
    pub envelope_fwhm: f64,
    /// DC level, fraction of full scale.
    pub dc_level: f64,
    pub fringe_visibility: f64,
    /// Additive Gaussian noise, ADC counts.
    pub noise_sigma: f64,
    pub k_mapping: KMapping,
    /// Quadratic dispersion phase, rad per (k - k0)^2.
    pub dispersion_a2: f64,
    /// Cubic dispersion phase, rad per (k - k0)^3.
    pub dispersion_a3: f64,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        Self {
            envelope_center: 0.5,
            envelope_fwhm: 0.6,
            dc_level: 0.5,
            fringe_visibility: 0.45,
            noise_sigma: 1.5,
            k_mapping: KMapping::default(),
            dispersion_a2: 6.0,
            dispersion_a3: 2.0,
        }
    }
}

impl OpticsConfig {
    /// Linear k-grid, no dispersion, no noise.
    pub fn ideal() -> Self {
        Self {
            noise_sigma: 0.0,
            k_mapping: KMapping::linear(),
            dispersion_a2: 0.0,
            dispersion_a3: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self, samples_per_aline: usize) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Optics(msg));
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise sigma {} must be >= 0", self.noise_sigma));
        }
        if !(self.dc_level >= 0.0 && self.fringe_visibility >= 0.0) {
            return bad("dc level and visibility must be >= 0".into());
        }
        if self.dc_level + self.fringe_visibility > 1.0 {
            return bad(format!(
                "dc level {} + visibility {} exceeds full scale",
                self.dc_level, self.fringe_visibility
            ));
        }
        if !(self.envelope_fwhm > 0.0) {
            return bad("envelope FWHM must be positive".into());
        }
        if !self.k_mapping.is_strictly_monotone(samples_per_aline) {
            return bad(format!("k-mapping {} is not strictly monotone", self.k_mapping));
        }
        Ok(())
    }

    /// Source power envelope `S(k)` in `[0, 1]`.
    pub fn envelope(&self, k: f64, n: usize) -> f64 {
        let band = self.k_mapping.uniform_step(n) * n as f64;
        let u = (k - self.k_mapping.k_at(0.0, n)) / band;
        let d = (u - self.envelope_center) / self.envelope_fwhm;
        (-4.0 * LN_2 * d * d).exp()
    }

    /// Dispersion phase at wavenumber `k`.
    pub fn dispersion_phase(&self, k: f64, n: usize) -> f64 {
        let dk = k - self.k_mapping.center_k(n);
        self.dispersion_a2 * dk * dk + self.dispersion_a3 * dk * dk * dk
    }
}

/// Digitize the phantom's interferograms at 12 bits.
///
/// `I(s) = round(FS * S(k) * [dc + V * sum_i r_i cos(2 k z_i + phi(k))] + n(s))`
/// clipped to `[0, 4095]`, with `k = k(s)` from the optics k-mapping.
pub fn synthesize_fringe(
    phantom: &Phantom,
    optics: &OpticsConfig,
    noise_seed: u64,
) -> Result<SpectralFrame, ConfigError> {
    let n = phantom.samples_per_aline;
    optics.validate(n)?;
    let limit = (n / 2) as f64;
    for r in phantom.alines.iter().flatten() {
        if !(r.depth >= 0.0 && r.depth < limit) {
            return Err(ConfigError::ReflectorDepth {
                depth: r.depth,
                limit,
            });
        }
    }

    let ks: Vec<f64> = (0..n).map(|s| optics.k_mapping.k_at(s as f64, n)).collect();
    let envelope: Vec<f64> = ks
        .iter()
        .map(|&k| f64::from(NATIVE_FULL_SCALE) * optics.envelope(k, n))
        .collect();
    let phase: Vec<f64> = ks.iter().map(|&k| optics.dispersion_phase(k, n)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, optics.noise_sigma).map_err(|e| ConfigError::Optics(e.to_string()))?;
    let full_scale = f64::from(NATIVE_FULL_SCALE);

    let mut samples = Vec::with_capacity(n * phantom.num_alines());
    let mut fringe = vec![0.0; n];
    for reflectors in &phantom.alines {
        fringe.iter_mut().for_each(|v| *v = 0.0);
        for r in reflectors.iter().filter(|r| r.reflectivity != 0.0) {
            for (s, v) in fringe.iter_mut().enumerate() {
                *v += r.reflectivity * (2.0 * ks[s] * r.depth + phase[s]).cos();
            }
        }
        for s in 0..n {
            let mut value =
                envelope[s] * (optics.dc_level + optics.fringe_visibility * fringe[s]);
            if optics.noise_sigma > 0.0 {
                value += noise.sample(&mut rng);
            }
            samples.push(value.round().clamp(0.0, full_scale) as u16);
        }
    }

    let frame = SpectralFrame::new(
        samples,
        n,
        phantom.num_alines(),
        NATIVE_BIT_DEPTH,
        optics.k_mapping.tag(),
    )
    .expect("synthesized samples are clipped to the 12-bit range");
    Ok(frame.with_seeds(FrameSeeds {
        phantom: 0,
        noise: noise_seed,
    }))
}

/// Phantom plus fringes for one frame of a seeded series.
pub fn simulate_frame(
    phantom_config: &PhantomConfig,
    optics: &OpticsConfig,
    seeds: FrameSeeds,
) -> Result<SpectralFrame, ConfigError> {
    let config = PhantomConfig {
        rng_seed: seeds.phantom,
        ..phantom_config.clone()
    };
    let phantom = make_phantom(&config)?;
    Ok(synthesize_fringe(&phantom, optics, seeds.noise)?.with_seeds(seeds))
}

/// Per-frame seeds derived from a run seed; stable for any frame count.
pub fn frame_seeds(run_seed: u64, frame_index: u64) -> FrameSeeds {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(frame_index);
    FrameSeeds {
        phantom: rng.random(),
        noise: rng.random(),
    }
}
