//! Full-reference image quality metrics: PSNR, exponent-weighted
//! (multi-scale) SSIM and CORR2, plus grouped mean ± std aggregation.
//!
//! SSIM statistics are global over the whole image unless a sliding window
//! is configured. Standard deviations and covariance use the unbiased
//! `n - 1` normalization.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::GrayImage;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("image shapes differ: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("correlation undefined: zero variance in {0}")]
    UndefinedCorrelation(&'static str),
    #[error("invalid metrics config: {0}")]
    Config(String),
    #[error("no rows to aggregate")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Number of scales `M`.
    pub scales: usize,
    /// Luminance exponent at the coarsest scale.
    pub alpha: f64,
    /// Contrast exponent per scale.
    pub beta: Vec<f64>,
    /// Structure exponent per scale.
    pub gamma: Vec<f64>,
    /// Peak intensity for PSNR.
    pub max_intensity: f64,
    /// Side of a square sliding window; `None` uses global statistics.
    pub window: Option<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        let c2 = 1e-4;
        Self {
            c1: 1e-4,
            c2,
            c3: 0.5 * c2,
            scales: 1,
            alpha: 1.0,
            beta: vec![0.0448],
            gamma: vec![0.0448],
            max_intensity: 1.0,
            window: None,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        let bad = |m: String| Err(MetricError::Config(m));
        if !(self.c1 > 0.0 && self.c2 > 0.0 && self.c3 > 0.0 && self.max_intensity > 0.0) {
            return bad("stability constants and max intensity must be positive".into());
        }
        if self.scales == 0 {
            return bad("at least one scale required".into());
        }
        if self.beta.len() != self.scales || self.gamma.len() != self.scales {
            return bad(format!(
                "{} scales need as many beta and gamma exponents, got {} and {}",
                self.scales,
                self.beta.len(),
                self.gamma.len()
            ));
        }
        if self.window == Some(0) {
            return bad("window must be at least 1 pixel".into());
        }
        Ok(())
    }
}

/// PSNR in dB, or a marker for identical images (zero MSE).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Db(f64),
    Identical,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(v),
            Psnr::Identical => None,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.6}"),
            Psnr::Identical => f.write_str("identical"),
        }
    }
}

/// MSSSIM value, or a marker when a negative component would be raised to a
/// non-integer power.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Msssim {
    Value(f64),
    Invalid,
}

impl Msssim {
    pub fn value(self) -> Option<f64> {
        match self {
            Msssim::Value(v) => Some(v),
            Msssim::Invalid => None,
        }
    }
}

impl fmt::Display for Msssim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Msssim::Value(v) => write!(f, "{v:.6}"),
            Msssim::Invalid => f.write_str("invalid"),
        }
    }
}

/// Luminance, contrast and structure comparison terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimComponents {
    pub luminance: f64,
    pub contrast: f64,
    pub structure: f64,
}

fn check_shapes(a: &GrayImage, b: &GrayImage) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::Shape(a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse(test: &GrayImage, reference: &GrayImage) -> Result<f64, MetricError> {
    check_shapes(test, reference)?;
    let sum: f64 = test
        .pixels()
        .iter()
        .zip(reference.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / test.pixels().len() as f64)
}

/// `10 log10(MAX^2 / MSE)`.
pub fn psnr(test: &GrayImage, reference: &GrayImage, config: &MetricsConfig) -> Result<Psnr, MetricError> {
    let mse = mse(test, reference)?;
    if mse == 0.0 {
        return Ok(Psnr::Identical);
    }
    Ok(Psnr::Db(10.0 * (config.max_intensity * config.max_intensity / mse).log10()))
}

struct Moments {
    mean_x: f64,
    mean_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
}

fn moments(x: &[f64], y: &[f64]) -> Moments {
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mean_x, b - mean_y);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let dof = if x.len() > 1 { n - 1.0 } else { 1.0 };
    Moments {
        mean_x,
        mean_y,
        var_x: sxx / dof,
        var_y: syy / dof,
        cov: sxy / dof,
    }
}

fn components_of(m: &Moments, config: &MetricsConfig) -> SsimComponents {
    // sigma_x * sigma_y as sqrt(var_x * var_y): exact when the variances match.
    let sxy = (m.var_x * m.var_y).sqrt();
    SsimComponents {
        luminance: (2.0 * m.mean_x * m.mean_y + config.c1)
            / (m.mean_x * m.mean_x + m.mean_y * m.mean_y + config.c1),
        contrast: (2.0 * sxy + config.c2) / (m.var_x + m.var_y + config.c2),
        structure: (m.cov + config.c3) / (sxy + config.c3),
    }
}

/// Global luminance, contrast and structure terms of `x` against `y`.
pub fn ssim_components(x: &GrayImage, y: &GrayImage, config: &MetricsConfig) -> Result<SsimComponents, MetricError> {
    check_shapes(x, y)?;
    Ok(components_of(&moments(x.pixels(), y.pixels()), config))
}

fn pow_checked(base: f64, exponent: f64) -> Option<f64> {
    if base < 0.0 && exponent.fract() != 0.0 {
        None
    } else {
        Some(base.powf(exponent))
    }
}

/// 2x2 box average; odd trailing rows/columns are dropped.
fn downsample(img: &GrayImage) -> Option<GrayImage> {
    let (h, w) = (img.height() / 2, img.width() / 2);
    if h == 0 || w == 0 {
        return None;
    }
    Some(GrayImage::from_fn(h, w, |r, c| {
        0.25 * (img.get(2 * r, 2 * c)
            + img.get(2 * r, 2 * c + 1)
            + img.get(2 * r + 1, 2 * c)
            + img.get(2 * r + 1, 2 * c + 1))
    }))
}

/// Composite score over `config.scales` dyadic scales for one pair of
/// same-sized regions.
fn composite(per_scale: &[SsimComponents], config: &MetricsConfig) -> Msssim {
    let mut score = 1.0;
    let last = per_scale.len() - 1;
    for (j, comp) in per_scale.iter().enumerate() {
        let factors = [
            (comp.contrast, config.beta[j]),
            (comp.structure, config.gamma[j]),
        ];
        for (base, exp) in factors {
            match pow_checked(base, exp) {
                Some(v) => score *= v,
                None => return Msssim::Invalid,
            }
        }
        if j == last {
            match pow_checked(comp.luminance, config.alpha) {
                Some(v) => score *= v,
                None => return Msssim::Invalid,
            }
        }
    }
    Msssim::Value(score)
}

fn window_components(x: &GrayImage, y: &GrayImage, size: usize, config: &MetricsConfig) -> Vec<SsimComponents> {
    let (h, w) = x.shape();
    let size_r = size.min(h);
    let size_c = size.min(w);
    let mut out = Vec::new();
    let mut bx = Vec::with_capacity(size_r * size_c);
    let mut by = Vec::with_capacity(size_r * size_c);
    for r0 in 0..=h - size_r {
        for c0 in 0..=w - size_c {
            bx.clear();
            by.clear();
            for r in r0..r0 + size_r {
                bx.extend_from_slice(&x.row(r)[c0..c0 + size_c]);
                by.extend_from_slice(&y.row(r)[c0..c0 + size_c]);
            }
            out.push(components_of(&moments(&bx, &by), config));
        }
    }
    out
}

/// `L_M^alpha * prod_j C_j^beta_j * S_j^gamma_j` over `config.scales` dyadic
/// scales. With one scale this is a single exponent-weighted SSIM.
pub fn msssim(x: &GrayImage, y: &GrayImage, config: &MetricsConfig) -> Result<Msssim, MetricError> {
    config.validate()?;
    check_shapes(x, y)?;
    let mut scales = vec![(x.clone(), y.clone())];
    for _ in 1..config.scales {
        let (px, py) = scales.last().expect("nonempty");
        match (downsample(px), downsample(py)) {
            (Some(dx), Some(dy)) => scales.push((dx, dy)),
            _ => {
                return Err(MetricError::Config(format!(
                    "{}x{} image too small for {} scales",
                    x.height(),
                    x.width(),
                    config.scales
                )))
            }
        }
    }

    match config.window {
        None => {
            let per_scale: Vec<_> = scales
                .iter()
                .map(|(a, b)| components_of(&moments(a.pixels(), b.pixels()), config))
                .collect();
            Ok(composite(&per_scale, config))
        }
        Some(size) => {
            // Mean of the windowed composite at each scale, combined across scales
            // through the same exponent product.
            let per_scale: Vec<Vec<SsimComponents>> = scales
                .iter()
                .map(|(a, b)| window_components(a, b, size, config))
                .collect();
            let mut total = 1.0;
            let last = per_scale.len() - 1;
            for (j, windows) in per_scale.iter().enumerate() {
                let mut scale_cfg = config.clone();
                scale_cfg.beta = vec![config.beta[j]];
                scale_cfg.gamma = vec![config.gamma[j]];
                if j != last {
                    scale_cfg.alpha = 0.0;
                }
                let mut sum = 0.0;
                for comp in windows {
                    match composite(std::slice::from_ref(comp), &scale_cfg) {
                        Msssim::Value(v) => sum += v,
                        Msssim::Invalid => return Ok(Msssim::Invalid),
                    }
                }
                total *= sum / windows.len() as f64;
            }
            Ok(Msssim::Value(total))
        }
    }
}

/// Pearson correlation over all pixels.
pub fn corr2(a: &GrayImage, b: &GrayImage) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    let n = a.pixels().len() as f64;
    let mean_a = a.pixels().iter().sum::<f64>() / n;
    let mean_b = b.pixels().iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.pixels().iter().zip(b.pixels()) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    match (saa == 0.0, sbb == 0.0) {
        (true, true) => Err(MetricError::UndefinedCorrelation("both images")),
        (true, false) => Err(MetricError::UndefinedCorrelation("first image")),
        (false, true) => Err(MetricError::UndefinedCorrelation("second image")),
        (false, false) => Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Original,
    Reconstructed,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Original => "original",
            Source::Reconstructed => "reconstructed",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "original" => Ok(Source::Original),
            "reconstructed" => Ok(Source::Reconstructed),
            other => Err(format!("unknown source {other:?}")),
        }
    }
}

/// Metrics of one test image against its 12-bit reference.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub image_id: String,
    pub bit_depth: u8,
    pub source: Source,
    pub psnr: Psnr,
    pub msssim: Msssim,
    /// `None` when the correlation is undefined (a constant image).
    pub corr2: Option<f64>,
}

pub fn evaluate_pair(
    image_id: &str,
    bit_depth: u8,
    source: Source,
    test: &GrayImage,
    reference: &GrayImage,
    config: &MetricsConfig,
) -> Result<MetricRow, MetricError> {
    let corr2 = match corr2(test, reference) {
        Ok(v) => Some(v),
        Err(MetricError::UndefinedCorrelation(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricRow {
        image_id: image_id.to_string(),
        bit_depth,
        source,
        psnr: psnr(test, reference, config)?,
        msssim: msssim(test, reference, config)?,
        corr2,
    })
}

/// Mean and sample standard deviation; `std = 0` when `n = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { n, mean, std })
    }

    pub fn single_sample(&self) -> bool {
        self.n == 1
    }
}

/// Aggregates of one (bit depth, source) group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub bit_depth: u8,
    pub source: Source,
    pub count: usize,
    pub psnr: Option<Summary>,
    /// Rows with an identical-image PSNR, excluded from `psnr`.
    pub psnr_identical: usize,
    pub msssim: Option<Summary>,
    pub msssim_invalid: usize,
    pub corr2: Option<Summary>,
    pub corr2_undefined: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    /// Ordered by bit depth, then source.
    pub groups: Vec<GroupSummary>,
}

pub fn aggregate(rows: Vec<MetricRow>) -> Result<MetricsReport, MetricError> {
    if rows.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut grouped: BTreeMap<(u8, Source), Vec<&MetricRow>> = BTreeMap::new();
    for row in &rows {
        grouped.entry((row.bit_depth, row.source)).or_default().push(row);
    }
    let groups = grouped
        .into_iter()
        .map(|((bit_depth, source), members)| {
            let psnr: Vec<f64> = members.iter().filter_map(|r| r.psnr.db()).collect();
            let ms: Vec<f64> = members.iter().filter_map(|r| r.msssim.value()).collect();
            let cc: Vec<f64> = members.iter().filter_map(|r| r.corr2).collect();
            GroupSummary {
                bit_depth,
                source,
                count: members.len(),
                psnr_identical: members.len() - psnr.len(),
                msssim_invalid: members.len() - ms.len(),
                corr2_undefined: members.len() - cc.len(),
                psnr: Summary::of(&psnr),
                msssim: Summary::of(&ms),
                corr2: Summary::of(&cc),
            }
        })
        .collect();
    Ok(MetricsReport { rows, groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, v: &[f64]) -> GrayImage {
        GrayImage::new(h, w, v.to_vec()).unwrap()
    }

    fn row(id: &str, bits: u8, source: Source, psnr: Psnr) -> MetricRow {
        MetricRow {
            image_id: id.into(),
            bit_depth: bits,
            source,
            psnr,
            msssim: Msssim::Value(0.9),
            corr2: Some(0.8),
        }
    }

    #[test]
    fn psnr_cases() {
        let cfg = MetricsConfig::default();
        let a = GrayImage::filled(4, 4, 0.3);
        assert_eq!(psnr(&a, &a, &cfg).unwrap(), Psnr::Identical);
        let b = a.map(|v| v + 0.1);
        let Psnr::Db(db) = psnr(&b, &a, &cfg).unwrap() else { panic!() };
        assert!((db - 20.0).abs() < 1e-9);
        let zero = GrayImage::filled(2, 2, 0.0);
        let one = GrayImage::filled(2, 2, 1.0);
        assert_eq!(psnr(&zero, &one, &cfg).unwrap(), Psnr::Db(0.0));
        assert!(matches!(
            psnr(&zero, &GrayImage::filled(2, 3, 0.0), &cfg),
            Err(MetricError::Shape(..))
        ));
    }

    #[test]
    fn identical_and_constant_components() {
        let cfg = MetricsConfig::default();
        let x = img(2, 3, &[0.1, 0.5, 0.2, 0.9, 0.4, 0.3]);
        let c = ssim_components(&x, &x, &cfg).unwrap();
        assert_eq!((c.luminance, c.contrast, c.structure), (1.0, 1.0, 1.0));
        let k = GrayImage::filled(3, 3, 0.5);
        let c = ssim_components(&k, &k, &cfg).unwrap();
        assert_eq!((c.luminance, c.contrast, c.structure), (1.0, 1.0, 1.0));
        assert_eq!(msssim(&x, &x, &cfg).unwrap(), Msssim::Value(1.0));
    }

    #[test]
    fn exponent_weighting_of_structure() {
        // 0.5^0.0448 = exp(0.0448 * ln 0.5)
        let expected = (0.0448 * 0.5f64.ln()).exp();
        assert!((expected - 0.9694).abs() < 1e-4);
        let comp = SsimComponents { luminance: 1.0, contrast: 1.0, structure: 0.5 };
        let Msssim::Value(v) = composite(&[comp], &MetricsConfig::default()) else { panic!() };
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn negative_structure_is_invalid() {
        let cfg = MetricsConfig::default();
        let x = img(1, 4, &[0.0, 1.0, 0.0, 1.0]);
        let y = img(1, 4, &[1.0, 0.0, 1.0, 0.0]);
        assert!(ssim_components(&x, &y, &cfg).unwrap().structure < 0.0);
        assert_eq!(msssim(&x, &y, &cfg).unwrap(), Msssim::Invalid);
    }

    #[test]
    fn multi_scale_uses_luminance_only_at_coarsest() {
        let x = GrayImage::from_fn(8, 8, |r, c| ((r * 8 + c) as f64 * 0.61).sin().abs());
        let y = x.map(|v| 0.8 * v + 0.1);
        let cfg = MetricsConfig {
            scales: 2,
            alpha: 1.0,
            beta: vec![0.5, 0.5],
            gamma: vec![0.5, 0.5],
            ..MetricsConfig::default()
        };
        let fine = ssim_components(&x, &y, &cfg).unwrap();
        let coarse = ssim_components(&downsample(&x).unwrap(), &downsample(&y).unwrap(), &cfg).unwrap();
        let expected = (fine.contrast * fine.structure).sqrt()
            * (coarse.contrast * coarse.structure).sqrt()
            * coarse.luminance;
        let Msssim::Value(v) = msssim(&x, &y, &cfg).unwrap() else { panic!() };
        assert!((v - expected).abs() < 1e-12);

        let tiny = GrayImage::filled(1, 1, 0.5);
        assert!(msssim(&tiny, &tiny, &cfg).is_err());
    }

    #[test]
    fn windowed_variant_of_identical_images() {
        let x = GrayImage::from_fn(6, 7, |r, c| ((r + 2 * c) % 5) as f64 / 4.0);
        let cfg = MetricsConfig {
            window: Some(3),
            ..MetricsConfig::default()
        };
        assert_eq!(msssim(&x, &x, &cfg).unwrap(), Msssim::Value(1.0));
        let y = x.map(|v| 1.0 - v);
        let windowed = msssim(&x, &y.map(|v| v * 0.5 + 0.2), &MetricsConfig { window: Some(3), ..cfg });
        assert!(windowed.is_ok());
    }

    #[test]
    fn config_validation() {
        let cfg = MetricsConfig { scales: 2, ..MetricsConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = MetricsConfig { c1: 0.0, ..MetricsConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn corr2_cases() {
        let a = img(2, 2, &[0.0, 1.0, 2.0, 3.0]);
        let b = img(2, 2, &[1.0, 3.0, 5.0, 7.0]);
        assert!((corr2(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(corr2(&a, &a).unwrap(), 1.0);
        let neg = a.map(|v| 4.0 - v);
        assert!((corr2(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        let k = GrayImage::filled(2, 2, 0.2);
        assert!(matches!(corr2(&k, &k), Err(MetricError::UndefinedCorrelation(_))));
        assert!(matches!(corr2(&a, &k), Err(MetricError::UndefinedCorrelation(_))));
    }

    #[test]
    fn aggregate_single_and_pair() {
        let one = aggregate(vec![row("a", 3, Source::Original, Psnr::Db(12.5))]).unwrap();
        let g = &one.groups[0];
        let p = g.psnr.unwrap();
        assert_eq!((p.mean, p.std, p.n), (12.5, 0.0, 1));
        assert!(p.single_sample());

        let two = aggregate(vec![
            row("a", 3, Source::Original, Psnr::Db(10.0)),
            row("b", 3, Source::Original, Psnr::Db(20.0)),
        ])
        .unwrap();
        let p = two.groups[0].psnr.unwrap();
        assert_eq!(p.mean, 15.0);
        assert!((p.std - 50f64.sqrt()).abs() < 1e-12);
        assert!((p.std - 7.071).abs() < 1e-3);
    }

    #[test]
    fn aggregate_excludes_identical_psnr() {
        let report = aggregate(vec![
            row("a", 8, Source::Original, Psnr::Identical),
            row("b", 8, Source::Original, Psnr::Db(40.0)),
        ])
        .unwrap();
        let g = &report.groups[0];
        assert_eq!(g.count, 2);
        assert_eq!(g.psnr_identical, 1);
        assert_eq!(g.psnr.unwrap().n, 1);
        assert_eq!(g.msssim.unwrap().n, 2);
    }

    #[test]
    fn aggregate_groups_by_depth_and_source() {
        let mut rows = Vec::new();
        for bits in 3..=8 {
            for source in [Source::Original, Source::Reconstructed] {
                rows.push(row("x", bits, source, Psnr::Db(f64::from(bits))));
            }
        }
        let report = aggregate(rows).unwrap();
        assert_eq!(report.groups.len(), 12);
        for source in [Source::Original, Source::Reconstructed] {
            assert_eq!(report.groups.iter().filter(|g| g.source == source).count(), 6);
        }
        assert_eq!(aggregate(Vec::new()), Err(MetricError::Empty));
    }
}
