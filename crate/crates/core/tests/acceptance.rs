//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! Runs with `harness = false` so the report is always visible:
//! `cargo test -p lowbit-oct --test acceptance`.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use lowbit_oct::dataset::{
    build_dataset, decode_fringe, decode_graymap, encode_fringe, encode_graymap, load_pairs, DatasetOptions, Split,
};
use lowbit_oct::harness::{cmd_dataset, cmd_evaluate, cmd_simulate, DatasetArgs, EvaluateArgs, SimulateArgs};
use lowbit_oct::metrics::{corr2, evaluate_pair, msssim, psnr, MetricsConfig, Msssim, Psnr, Source};
use lowbit_oct::phantom::{frame_seeds, simulate_frame, synthesize_fringe, OpticsConfig, Phantom, PhantomConfig, Reflector};
use lowbit_oct::pipeline::{
    compensate_dispersion, frame_to_magnitude, full_depth_transform, k_linearize, Apodization, PipelineConfig,
};
use lowbit_oct::quantize::{requantize, requantize_code, subtract_background, BackgroundMode};
use lowbit_oct::spectral::SpectralFrame;
use lowbit_oct::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel_err(got: f64, want: f64) -> f64 {
    if got == want {
        0.0
    } else {
        (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
    }
}

// ---------------------------------------------------------------------------

fn quantization_exactness() -> Outcome {
    let start = Instant::now();
    let mut mismatches = 0usize;
    for bits in 1..=12u8 {
        for code in 0..=4095u16 {
            let oracle = (u64::from(code) * (1u64 << bits)) / 4096;
            if u64::from(requantize_code(code, bits)) != oracle {
                mismatches += 1;
            }
        }
    }
    let all: Vec<u16> = (0..=4095).collect();
    let frame = SpectralFrame::new(all.clone(), 4096, 1, 12, "poly:0,1").map_err(|e| e.to_string())?;
    let identity = requantize(&frame, 12).map_err(|e| e.to_string())?.samples() == all.as_slice();
    let elapsed = start.elapsed();
    check(
        mismatches == 0 && identity && elapsed < Duration::from_secs(1),
        format!("{mismatches} mismatches over 12x4096 codes, N=12 identity {identity}, {elapsed:?}"),
    )
}

// ---------------------------------------------------------------------------
// Brute-force metric oracles over explicit (row, col) loops.

struct Oracle;

impl Oracle {
    fn mean(img: &GrayImage) -> f64 {
        let mut s = 0.0;
        for r in 0..img.height() {
            for c in 0..img.width() {
                s += img.get(r, c);
            }
        }
        s / (img.height() * img.width()) as f64
    }

    fn cov(a: &GrayImage, b: &GrayImage) -> f64 {
        let (ma, mb) = (Self::mean(a), Self::mean(b));
        let mut s = 0.0;
        for r in 0..a.height() {
            for c in 0..a.width() {
                s += (a.get(r, c) - ma) * (b.get(r, c) - mb);
            }
        }
        s / (a.height() * a.width() - 1) as f64
    }

    fn psnr(x: &GrayImage, y: &GrayImage) -> Option<f64> {
        let mut s = 0.0;
        for r in 0..x.height() {
            for c in 0..x.width() {
                s += (x.get(r, c) - y.get(r, c)).powi(2);
            }
        }
        let mse = s / (x.height() * x.width()) as f64;
        (mse > 0.0).then(|| 10.0 * (1.0 / mse).log10())
    }

    fn msssim(x: &GrayImage, y: &GrayImage) -> Option<f64> {
        let (c1, c2) = (1e-4, 1e-4);
        let c3 = c2 / 2.0;
        let (mx, my) = (Self::mean(x), Self::mean(y));
        let (sx, sy) = (Self::cov(x, x).sqrt(), Self::cov(y, y).sqrt());
        let sxy = Self::cov(x, y);
        let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        let cc = (2.0 * sx * sy + c2) / (sx * sx + sy * sy + c2);
        let s = (sxy + c3) / (sx * sy + c3);
        if l < 0.0 || cc < 0.0 || s < 0.0 {
            return None;
        }
        Some(l * cc.powf(0.0448) * s.powf(0.0448))
    }

    fn corr2(a: &GrayImage, b: &GrayImage) -> f64 {
        Self::cov(a, b) / (Self::cov(a, a) * Self::cov(b, b)).sqrt()
    }
}

fn metric_oracle_equivalence() -> Outcome {
    let config = MetricsConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut marker_mismatch = 0;
    let mut invalid = 0;
    for i in 0..200 {
        let x = GrayImage::from_fn(16, 16, |_, _| rng.random::<f64>());
        // Mix correlated, anti-correlated and independent pairs.
        let y = match i % 4 {
            0 => GrayImage::from_fn(16, 16, |_, _| rng.random::<f64>()),
            1 => GrayImage::from_fn(16, 16, |r, c| (1.0 - x.get(r, c) + 0.1 * rng.random::<f64>()).clamp(0.0, 1.0)),
            _ => GrayImage::from_fn(16, 16, |r, c| (x.get(r, c) + 0.2 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0)),
        };
        let p = psnr(&x, &y, &config).map_err(|e| e.to_string())?;
        match (p, Oracle::psnr(&x, &y)) {
            (Psnr::Db(a), Some(b)) => worst = worst.max(rel_err(a, b)),
            _ => marker_mismatch += 1,
        }
        let m = msssim(&x, &y, &config).map_err(|e| e.to_string())?;
        match (m, Oracle::msssim(&x, &y)) {
            (Msssim::Value(a), Some(b)) => worst = worst.max(rel_err(a, b)),
            (Msssim::Invalid, None) => invalid += 1,
            _ => marker_mismatch += 1,
        }
        let c = corr2(&x, &y).map_err(|e| e.to_string())?;
        worst = worst.max(rel_err(c, Oracle::corr2(&x, &y)));
    }

    let img = GrayImage::from_fn(16, 16, |r, c| ((r * 7 + c * 3) % 11) as f64 / 10.0);
    let self_corr = corr2(&img, &img).map_err(|e| e.to_string())?;
    let anti = corr2(&img, &img.map(|v| 1.0 - v)).map_err(|e| e.to_string())?;
    let corr_ok = (self_corr - 1.0).abs() <= 1e-12 && (anti + 1.0).abs() <= 1e-12;
    check(
        worst <= 1e-9 && marker_mismatch == 0 && corr_ok,
        format!(
            "200 pairs, max rel err {worst:.2e}, {invalid} invalid on both sides, {marker_mismatch} marker mismatches, \
             self {self_corr}, anti {anti}"
        ),
    )
}

// ---------------------------------------------------------------------------

fn monotone_degradation() -> Outcome {
    let start = Instant::now();
    let phantom = PhantomConfig::default();
    let optics = OpticsConfig::default();
    let frames: Vec<(String, SpectralFrame)> = (0..50u64)
        .map(|i| {
            let f = simulate_frame(&phantom, &optics, frame_seeds(17, i)).expect("valid defaults");
            (format!("frame_{i:04}"), f)
        })
        .collect();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let options = DatasetOptions {
        pipeline: PipelineConfig::matched(&optics),
        ..DatasetOptions::default()
    };
    let manifest = build_dataset(&frames, &options, dir.path()).map_err(|e| e.to_string())?;
    let config = MetricsConfig::default();

    let mut means = Vec::new();
    for bits in 3..=8u8 {
        let (mut ps, mut ms, mut cs) = (Vec::new(), Vec::new(), Vec::new());
        for split in [Split::Train, Split::Val, Split::Test] {
            for pair in load_pairs(&manifest, dir.path(), bits, split).map_err(|e| e.to_string())? {
                let row = evaluate_pair(&pair.image_id, bits, Source::Original, &pair.low.image, &pair.reference.image, &config)
                    .map_err(|e| e.to_string())?;
                ps.extend(row.psnr.db());
                ms.extend(row.msssim.value());
                cs.extend(row.corr2);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        if ps.len() != 50 || ms.len() != 50 || cs.len() != 50 {
            return Err(format!("{bits}-bit: expected 50 finite values, got {}/{}/{}", ps.len(), ms.len(), cs.len()));
        }
        means.push((bits, mean(&ps), mean(&ms), mean(&cs)));
    }
    let elapsed = start.elapsed();

    let nondecreasing = means
        .windows(2)
        .all(|w| w[1].1 >= w[0].1 && w[1].2 >= w[0].2 && w[1].3 >= w[0].3);
    let gain = means[5].1 - means[0].1;
    let table: Vec<String> = means
        .iter()
        .map(|(b, p, m, c)| format!("{b}:{p:.2}/{m:.4}/{c:.4}"))
        .collect();
    check(
        nondecreasing && gain >= 8.0 && elapsed < Duration::from_secs(120),
        format!("psnr/msssim/corr2 {}, gain {gain:.2} dB, {elapsed:.1?}", table.join(" ")),
    )
}

// ---------------------------------------------------------------------------

/// Bins below this are excluded from the argmax: the spectral envelope left
/// after mean removal concentrates there.
const DC_GUARD: usize = 8;

fn fringe_localization() -> Outcome {
    let n = 1024;
    let optics = OpticsConfig::default();
    let mut pipeline = PipelineConfig::matched(&optics);
    pipeline.resize_target = None;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0i64;
    let mut report = Vec::new();
    for trial in 0..10u64 {
        let depth = rng.random_range(2.0 * DC_GUARD as f64..(n / 2 - 8) as f64);
        let reflectivity = rng.random_range(0.1..0.5);
        let phantom = Phantom::uniform(n, 8, &[Reflector { depth, reflectivity }]);
        let frame = synthesize_fringe(&phantom, &optics, trial).map_err(|e| e.to_string())?;
        let mag = frame_to_magnitude(&frame, &pipeline).map_err(|e| e.to_string())?;
        for a in 0..mag.num_alines {
            let err = (mag.peak_depth(a, DC_GUARD) as i64 - depth.round() as i64).abs();
            worst = worst.max(err);
        }
        report.push(format!("{depth:.1}"));
    }
    check(
        worst <= 1,
        format!("10 phantoms at depths [{}], worst error {worst} px", report.join(", ")),
    )
}

// ---------------------------------------------------------------------------

fn pipeline_invariants() -> Outcome {
    let phantom = PhantomConfig {
        num_alines: 32,
        ..PhantomConfig::default()
    };
    let optics = OpticsConfig::default();
    let frame = simulate_frame(&phantom, &optics, frame_seeds(5, 0)).map_err(|e| e.to_string())?;
    let config = PipelineConfig::matched(&optics);

    let bg = subtract_background(&frame, BackgroundMode::PerAline);
    let worst_mean = bg
        .alines()
        .map(|a| (a.iter().sum::<f64>() / a.len() as f64).abs())
        .fold(0.0, f64::max);

    let linear = k_linearize(&bg, &config).map_err(|e| e.to_string())?;
    let corrected = compensate_dispersion(&linear, &config);
    let plain = compensate_dispersion(
        &linear,
        &PipelineConfig {
            dispersion_a2: 0.0,
            dispersion_a3: 0.0,
            ..config.clone()
        },
    );
    let worst_mag = corrected
        .values
        .iter()
        .zip(&plain.values)
        .map(|(a, b)| (a.norm() - b.norm()).abs() / b.norm().max(1.0))
        .fold(0.0, f64::max);

    let mut worst_parseval = 0.0f64;
    for a in 0..corrected.num_alines {
        let line = corrected.aline(a);
        let spectrum = full_depth_transform(line, Apodization::None);
        let e_in: f64 = line.iter().map(|v| v.norm_sqr()).sum();
        let e_out: f64 = spectrum.iter().map(|v| v.norm_sqr()).sum();
        worst_parseval = worst_parseval.max(rel_err(e_out, e_in));
    }
    check(
        worst_mean <= 1e-9 && worst_mag <= 1e-9 && worst_parseval <= 1e-6,
        format!("column mean {worst_mean:.1e}, magnitude {worst_mag:.1e}, Parseval {worst_parseval:.1e}"),
    )
}

// ---------------------------------------------------------------------------

fn run_once(root: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let fringes = root.join("fringes");
    let data = root.join("data");
    let results = root.join("results");
    cmd_simulate(&SimulateArgs {
        out: fringes.clone(),
        frames: 10,
        seed: 3,
        alines: Some(32),
        samples: None,
        config: None,
    })
    .map_err(|e| e.to_string())?;
    cmd_dataset(&DatasetArgs {
        fringes,
        out: data.clone(),
        depths: "3-8".into(),
        split_seed: 4,
        ratio: "8:1:1".into(),
        background: None,
        interpolation: None,
        fixed_window: false,
        config: None,
    })
    .map_err(|e| e.to_string())?;
    let out = cmd_evaluate(&EvaluateArgs {
        dataset: data,
        out: results,
        reconstructed: None,
        split: "test".into(),
        config: None,
    })
    .map_err(|e| e.to_string())?;
    [out.per_image, out.aggregate, out.plot_data]
        .iter()
        .map(|p| {
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            fs::read(p).map(|b| (name, b)).map_err(|e| e.to_string())
        })
        .collect()
}

fn determinism_and_formats() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = run_once(a.path())?;
    let second = run_once(b.path())?;
    let identical = first == second && first.iter().all(|(_, bytes)| !bytes.is_empty());

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut fringe_ok = true;
    for bits in [3u8, 8, 12] {
        let max = (1u32 << bits) - 1;
        let samples: Vec<u16> = (0..96).map(|_| rng.random_range(0..=max) as u16).collect();
        let frame = SpectralFrame::new(samples, 12, 8, bits, "poly:0,1.1,-0.1").map_err(|e| e.to_string())?;
        fringe_ok &= decode_fringe(&encode_fringe(&frame)).map_err(|e| e.to_string())? == frame;
    }

    // Graymaps store 16-bit codes: exact for code-aligned pixels, half a code otherwise.
    let coded = GrayImage::from_fn(9, 13, |_, _| f64::from(rng.random::<u16>()) / 65535.0);
    let free = GrayImage::from_fn(9, 13, |_, _| rng.random::<f64>());
    let comments = [("bit_depth", "5".to_string())];
    let bytes = encode_graymap(&coded, &comments).map_err(|e| e.to_string())?;
    let (back, meta) = decode_graymap(&bytes).map_err(|e| e.to_string())?;
    let (free_back, _) = decode_graymap(&encode_graymap(&free, &[]).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let half_code = 0.5 / 65535.0 + 1e-15;
    let graymap_ok = back == coded
        && meta.get("bit_depth").map(String::as_str) == Some("5")
        && encode_graymap(&back, &comments).map_err(|e| e.to_string())? == bytes
        && free_back.pixels().iter().zip(free.pixels()).all(|(x, y)| (x - y).abs() <= half_code);

    check(
        identical && fringe_ok && graymap_ok,
        format!(
            "CSVs byte-identical {identical} ({}), fringe round trip {fringe_ok}, graymap round trip {graymap_ok}",
            first.iter().map(|(n, b)| format!("{n} {} B", b.len())).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 6] = [
        ("quantization exactness", quantization_exactness),
        ("metric oracle equivalence", metric_oracle_equivalence),
        ("monotone degradation", monotone_degradation),
        ("fringe localization", fringe_localization),
        ("pipeline invariants", pipeline_invariants),
        ("determinism and formats", determinism_and_formats),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
