//! Command-line harness: `simulate`, `dataset`, `evaluate`, `report`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error. The worker
//! count comes from `LOWBIT_OCT_WORKERS` (default: all cores); outputs do not
//! depend on it.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    build_dataset, depth_dir, load_pairs, plot_records, read_csv, read_fringe, read_graymap, read_manifest,
    write_atomic, write_csv, write_fringe, AggregateRecord, DatasetError, DatasetOptions, MetricRecord, Split,
    SplitRatio, MANIFEST_FILE,
};
use crate::metrics::{aggregate, evaluate_pair, MetricRow, MetricsConfig, Source};
use crate::phantom::{frame_seeds, simulate_frame, OpticsConfig, PhantomConfig};
use crate::pipeline::{Interpolation, PipelineConfig};
use crate::quantize::BackgroundMode;
use crate::spectral::NATIVE_BIT_DEPTH;

pub const WORKERS_ENV: &str = "LOWBIT_OCT_WORKERS";
pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const PER_IMAGE_CSV: &str = "per_image.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const PLOT_DATA_CSV: &str = "plot_data.csv";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Data(_) => 2,
        }
    }
}

impl From<DatasetError> for HarnessError {
    fn from(e: DatasetError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

fn data_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Data(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "lowbit-oct", version, about = "Low bit-depth OCT simulation, dataset and evaluation harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize 12-bit fringe files from seeded phantoms.
    Simulate(SimulateArgs),
    /// Requantize fringes, process them into paired B-scans and write a manifest.
    Dataset(DatasetArgs),
    /// Score test-split B-scans (and optional reconstructions) against the 12-bit references.
    Evaluate(EvaluateArgs),
    /// Render an aggregate metrics table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output directory for fringe files.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of B-frames.
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    /// Run seed; per-frame phantom and noise seeds derive from it.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// A-lines per frame (overrides the config file).
    #[arg(long)]
    pub alines: Option<usize>,
    /// Samples per A-line (overrides the config file).
    #[arg(long)]
    pub samples: Option<usize>,
    /// JSON file with optional `phantom` and `optics` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Directory of `.octf` fringe files.
    #[arg(long)]
    pub fringes: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Bit depths, e.g. `3-8`, `4` or `3,5,7`.
    #[arg(long, default_value = "3-8")]
    pub depths: String,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// train:val:test frame ratio.
    #[arg(long, default_value = "8:1:1")]
    pub ratio: String,
    /// `per-aline` or `mean-spectrum`.
    #[arg(long)]
    pub background: Option<String>,
    /// `linear` or `cubic` k-linearization.
    #[arg(long)]
    pub interpolation: Option<String>,
    /// Keep the configured display window instead of calibrating on the references.
    #[arg(long)]
    pub fixed_window: bool,
    /// JSON file with an optional `pipeline` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Dataset directory or manifest path.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for CSV tables.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory holding `bit<N>/<image_id>.pgm` reconstructions.
    #[arg(long)]
    pub reconstructed: Option<PathBuf>,
    /// Split to score.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// JSON file with an optional `metrics` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Aggregate CSV written by `evaluate`.
    #[arg(long)]
    pub aggregate: PathBuf,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Optional configuration file contents; absent sections keep defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub phantom: Option<PhantomConfig>,
    pub optics: Option<OpticsConfig>,
    pub pipeline: Option<PipelineConfig>,
    pub metrics: Option<MetricsConfig>,
}

fn load_config_file(path: Option<&Path>) -> Result<ConfigFile, HarnessError> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = fs::read_to_string(path).map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))
}

/// Resolved settings of a `simulate` run, written next to its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateSnapshot {
    pub command: String,
    pub frames: usize,
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub optics: OpticsConfig,
}

fn write_snapshot<T: Serialize>(dir: &Path, snapshot: &T) -> Result<(), HarnessError> {
    let mut json = serde_json::to_string_pretty(snapshot).map_err(data_err)?;
    json.push('\n');
    write_atomic(&dir.join(RUN_CONFIG_FILE), json.as_bytes())?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::Data(format!("{}: {e}", dir.display())))
}

pub fn frame_id(index: usize) -> String {
    format!("frame_{index:04}")
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<Vec<PathBuf>, HarnessError> {
    if args.frames == 0 {
        return Err(HarnessError::Usage("--frames must be at least 1".into()));
    }
    let file = load_config_file(args.config.as_deref())?;
    let mut phantom = file.phantom.unwrap_or_default();
    if let Some(a) = args.alines {
        phantom.num_alines = a;
    }
    if let Some(s) = args.samples {
        phantom.samples_per_aline = s;
    }
    let optics = file.optics.unwrap_or_default();
    phantom.validate().map_err(|e| HarnessError::Usage(e.to_string()))?;
    optics
        .validate(phantom.samples_per_aline)
        .map_err(|e| HarnessError::Usage(e.to_string()))?;

    create_dir(&args.out)?;
    let paths = (0..args.frames)
        .into_par_iter()
        .map(|i| {
            let frame = simulate_frame(&phantom, &optics, frame_seeds(args.seed, i as u64))
                .map_err(|e| HarnessError::Usage(e.to_string()))?;
            let path = args.out.join(format!("{}.octf", frame_id(i)));
            write_fringe(&path, &frame)?;
            Ok(path)
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    write_snapshot(
        &args.out,
        &SimulateSnapshot {
            command: "simulate".into(),
            frames: args.frames,
            seed: args.seed,
            phantom,
            optics,
        },
    )?;
    Ok(paths)
}

/// Parse `3-8`, `4` or `3,5,7` into sorted unique depths in 1..=11.
pub fn parse_depths(spec: &str) -> Result<Vec<u8>, HarnessError> {
    let bad = || HarnessError::Usage(format!("invalid --depths {spec:?}"));
    let mut depths = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if let Some((lo, hi)) = part.split_once('-') {
            let lo: u8 = lo.trim().parse().map_err(|_| bad())?;
            let hi: u8 = hi.trim().parse().map_err(|_| bad())?;
            if lo > hi {
                return Err(bad());
            }
            depths.extend(lo..=hi);
        } else {
            depths.push(part.parse().map_err(|_| bad())?);
        }
    }
    depths.sort_unstable();
    depths.dedup();
    if depths.is_empty() || depths.iter().any(|d| !(1..NATIVE_BIT_DEPTH).contains(d)) {
        return Err(HarnessError::Usage(format!("--depths {spec:?} must lie in 1..=11")));
    }
    Ok(depths)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSnapshot {
    pub command: String,
    pub fringes: PathBuf,
    pub depths: Vec<u8>,
    pub split_seed: u64,
    pub split_ratio: SplitRatio,
    pub calibrate_window: bool,
    pub pipeline: PipelineConfig,
}

pub fn cmd_dataset(args: &DatasetArgs) -> Result<crate::dataset::DatasetManifest, HarnessError> {
    let depths = parse_depths(&args.depths)?;
    let ratio: SplitRatio = args.ratio.parse().map_err(HarnessError::Usage)?;
    let file = load_config_file(args.config.as_deref())?;
    if !args.fringes.is_dir() {
        return Err(HarnessError::Data(format!(
            "fringe directory {} does not exist",
            args.fringes.display()
        )));
    }

    let simulated: Option<SimulateSnapshot> = fs::read_to_string(args.fringes.join(RUN_CONFIG_FILE))
        .ok()
        .and_then(|text| serde_json::from_str(&text).ok());
    let mut pipeline = match (&file.pipeline, &simulated) {
        (Some(p), _) => p.clone(),
        (None, Some(sim)) => PipelineConfig::matched(&sim.optics),
        (None, None) => PipelineConfig::matched(&OpticsConfig::default()),
    };
    if let Some(bg) = &args.background {
        pipeline.background = match bg.as_str() {
            "per-aline" => BackgroundMode::PerAline,
            "mean-spectrum" => BackgroundMode::MeanSpectrum,
            other => return Err(HarnessError::Usage(format!("unknown --background {other:?}"))),
        };
    }
    if let Some(interp) = &args.interpolation {
        pipeline.interpolation = match interp.as_str() {
            "linear" => Interpolation::Linear,
            "cubic" => Interpolation::Cubic,
            other => return Err(HarnessError::Usage(format!("unknown --interpolation {other:?}"))),
        };
    }
    pipeline.validate().map_err(|e| HarnessError::Usage(e.to_string()))?;

    let mut fringe_paths: Vec<PathBuf> = fs::read_dir(&args.fringes)
        .map_err(|e| HarnessError::Data(format!("{}: {e}", args.fringes.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "octf"))
        .collect();
    fringe_paths.sort();
    if fringe_paths.is_empty() {
        return Err(HarnessError::Data(format!(
            "no .octf files in {}",
            args.fringes.display()
        )));
    }
    let frames = fringe_paths
        .par_iter()
        .map(|path| {
            let frame = read_fringe(path)?;
            if frame.bit_depth() != NATIVE_BIT_DEPTH {
                return Err(HarnessError::Data(format!(
                    "{}: expected 12-bit fringes, found {}-bit",
                    path.display(),
                    frame.bit_depth()
                )));
            }
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| HarnessError::Data(format!("{}: bad file name", path.display())))?;
            Ok((id.to_string(), frame))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    let options = DatasetOptions {
        bit_depths: depths.clone(),
        pipeline: pipeline.clone(),
        calibrate_window: !args.fixed_window,
        split_seed: args.split_seed,
        split_ratio: ratio,
        phantom: simulated
            .as_ref()
            .map(|s| serde_json::to_value(&s.phantom).expect("serializable")),
        optics: simulated
            .as_ref()
            .map(|s| serde_json::to_value(&s.optics).expect("serializable")),
        ..DatasetOptions::default()
    };
    create_dir(&args.out)?;
    let manifest = build_dataset(&frames, &options, &args.out)?;
    write_snapshot(
        &args.out,
        &DatasetSnapshot {
            command: "dataset".into(),
            fringes: args.fringes.clone(),
            depths,
            split_seed: args.split_seed,
            split_ratio: ratio,
            calibrate_window: !args.fixed_window,
            pipeline: manifest.pipeline.clone(),
        },
    )?;
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateSnapshot {
    pub command: String,
    pub manifest: PathBuf,
    pub reconstructed: Option<PathBuf>,
    pub split: Split,
    pub metrics: MetricsConfig,
}

/// Paths and counts produced by `evaluate`.
#[derive(Debug, Clone)]
pub struct EvaluateOutcome {
    pub rows: usize,
    pub missing_reconstructions: Vec<String>,
    pub per_image: PathBuf,
    pub aggregate: PathBuf,
    pub plot_data: PathBuf,
}

pub fn reconstruction_path(dir: &Path, bit_depth: u8, image_id: &str) -> PathBuf {
    dir.join(depth_dir(bit_depth)).join(format!("{image_id}.pgm"))
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<EvaluateOutcome, HarnessError> {
    let split: Split = args.split.parse().map_err(HarnessError::Usage)?;
    let file = load_config_file(args.config.as_deref())?;
    let metrics = file.metrics.unwrap_or_default();
    metrics.validate().map_err(|e| HarnessError::Usage(e.to_string()))?;
    let manifest_path = if args.dataset.is_dir() {
        args.dataset.join(MANIFEST_FILE)
    } else {
        args.dataset.clone()
    };
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let manifest = read_manifest(&manifest_path)?;

    let mut jobs = Vec::new();
    for &bits in &manifest.bit_depths {
        for pair in load_pairs(&manifest, &root, bits, split)? {
            jobs.push((bits, pair));
        }
    }
    if jobs.is_empty() {
        return Err(HarnessError::Data(format!(
            "the {} split of {} is empty",
            args.split,
            manifest_path.display()
        )));
    }

    let results = jobs
        .par_iter()
        .map(|(bits, pair)| {
            let reference = &pair.reference.image;
            let mut rows = vec![evaluate_pair(
                &pair.image_id,
                *bits,
                Source::Original,
                &pair.low.image,
                reference,
                &metrics,
            )
            .map_err(data_err)?];
            let mut missing = None;
            if let Some(dir) = &args.reconstructed {
                let path = reconstruction_path(dir, *bits, &pair.image_id);
                if path.is_file() {
                    let recon = read_graymap(&path)?;
                    let row = evaluate_pair(&pair.image_id, *bits, Source::Reconstructed, &recon, reference, &metrics)
                        .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
                    rows.push(row);
                } else {
                    missing = Some(format!("{} ({bits}-bit): {}", pair.image_id, path.display()));
                }
            }
            Ok((rows, missing))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    let mut rows: Vec<MetricRow> = Vec::new();
    let mut missing_reconstructions = Vec::new();
    for (r, m) in results {
        rows.extend(r);
        missing_reconstructions.extend(m);
    }
    for m in &missing_reconstructions {
        eprintln!("warning: missing reconstruction for {m}; excluded");
    }
    if args.reconstructed.is_some() && missing_reconstructions.len() == jobs.len() {
        return Err(HarnessError::Data(format!(
            "no reconstructions found under {}",
            args.reconstructed.as_ref().expect("checked").display()
        )));
    }
    rows.sort_by(|a, b| (a.source, a.bit_depth, &a.image_id).cmp(&(b.source, b.bit_depth, &b.image_id)));

    let report = aggregate(rows).map_err(data_err)?;
    create_dir(&args.out)?;
    let per_image = args.out.join(PER_IMAGE_CSV);
    let aggregate_path = args.out.join(AGGREGATE_CSV);
    let plot_data = args.out.join(PLOT_DATA_CSV);
    write_csv(&per_image, report.rows.iter().map(MetricRecord::from))?;
    write_csv(&aggregate_path, report.groups.iter().map(AggregateRecord::from))?;
    write_csv(&plot_data, plot_records(&report.groups))?;
    write_snapshot(
        &args.out,
        &EvaluateSnapshot {
            command: "evaluate".into(),
            manifest: manifest_path,
            reconstructed: args.reconstructed.clone(),
            split,
            metrics,
        },
    )?;
    Ok(EvaluateOutcome {
        rows: report.rows.len(),
        missing_reconstructions,
        per_image,
        aggregate: aggregate_path,
        plot_data,
    })
}

fn mean_std(mean: Option<f64>, std: Option<f64>, decimals: usize) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.decimals$}±{s:.decimals$}"),
        _ => "n/a".into(),
    }
}

/// Aligned text table: one row per (bit depth, source).
pub fn render_table(records: &[AggregateRecord]) -> String {
    let header = ["Bit depth", "Image", "PSNR (dB)", "MSSSIM", "CORR2"];
    let mut sorted: Vec<&AggregateRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.bit_depth, r.source));
    let mut last_depth = None;
    let rows: Vec<[String; 5]> = sorted
        .iter()
        .map(|r| {
            let depth = if last_depth == Some(r.bit_depth) {
                String::new()
            } else {
                format!("{}-bit", r.bit_depth)
            };
            last_depth = Some(r.bit_depth);
            let mut source = r.source.as_str().to_string();
            source[..1].make_ascii_uppercase();
            [
                depth,
                source,
                mean_std(r.psnr_mean, r.psnr_std, 3),
                mean_std(r.msssim_mean, r.msssim_std, 3),
                mean_std(r.corr2_mean, r.corr2_std, 3),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let mut text = String::new();
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            if i > 0 {
                text.push_str("  ");
            }
            let pad = w - cell.chars().count();
            text.push_str(cell);
            text.extend(std::iter::repeat_n(' ', pad));
        }
        let _ = writeln!(out, "{}", text.trim_end());
    };
    line(&mut out, &header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&mut out, &rule.iter().map(String::as_str).collect::<Vec<_>>());
    for row in &rows {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

pub fn cmd_report(args: &ReportArgs) -> Result<String, HarnessError> {
    let records: Vec<AggregateRecord> = read_csv(&args.aggregate)?;
    if records.is_empty() {
        return Err(HarnessError::Data(format!("{}: no aggregate rows", args.aggregate.display())));
    }
    let table = render_table(&records);
    if let Some(out) = &args.out {
        fs::write(out, &table).map_err(|e| HarnessError::Data(format!("{}: {e}", out.display())))?;
    }
    Ok(table)
}

fn configure_workers() -> Result<(), HarnessError> {
    let Ok(value) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let workers: usize = value
        .parse()
        .map_err(|_| HarnessError::Usage(format!("{WORKERS_ENV}={value:?} is not a worker count")))?;
    // A global pool may already exist (e.g. in tests); the count then stays as is.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), HarnessError> {
    configure_workers()?;
    match &cli.command {
        Command::Simulate(args) => {
            let paths = cmd_simulate(args)?;
            println!("wrote {} fringe files to {}", paths.len(), args.out.display());
        }
        Command::Dataset(args) => {
            let m = cmd_dataset(args)?;
            println!(
                "wrote {} images for {} frames (train {}, val {}, test {}) to {}",
                m.num_images,
                m.num_frames,
                m.split_counts.train,
                m.split_counts.val,
                m.split_counts.test,
                args.out.display()
            );
        }
        Command::Evaluate(args) => {
            let outcome = cmd_evaluate(args)?;
            println!(
                "scored {} images; tables in {}",
                outcome.rows,
                args.out.display()
            );
        }
        Command::Report(args) => print!("{}", cmd_report(args)?),
    }
    Ok(())
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
