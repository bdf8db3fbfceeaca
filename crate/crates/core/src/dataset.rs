//! On-disk formats and the paired low-bit / 12-bit dataset.
//!
//! * Fringe files (`.octf`): `OCTF`, a little-endian `u32` header length, a
//!   `key=value` text header, then little-endian `u16` samples, A-line
//!   contiguous.
//! * B-scans: binary 16-bit portable graymaps (`P5`, maxval 65535,
//!   big-endian samples), `pixel = round(value * 65535)`.
//! * Manifest: JSON with dataset-level keys and an entry table.
//! * Metric tables: comma-separated values.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::GrayImage;
use crate::metrics::{GroupSummary, MetricRow, Source, Summary};
use crate::pipeline::{
    frame_to_magnitude, process_frame, BScan, DisplayWindow, PipelineConfig, PipelineError,
};
use crate::quantize::{requantize, QuantizeError};
use crate::spectral::{max_code, FrameError, FrameSeeds, SpectralFrame, NATIVE_BIT_DEPTH};

pub const FRINGE_MAGIC: &[u8; 4] = b"OCTF";
pub const FRINGE_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const GRAYMAP_MAX: f64 = 65535.0;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated {what}: expected {expected} bytes, found {actual}")]
    Truncated {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("malformed header at byte {offset}: {message}")]
    Header { offset: usize, message: String },
    #[error("sample {value} at byte {offset} exceeds {max} for a {bit_depth}-bit file")]
    Range {
        offset: usize,
        value: u16,
        max: u16,
        bit_depth: u8,
    },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("malformed graymap at byte {offset}: {message}")]
    Graymap { offset: usize, message: String },
    #[error("pixel value {0} outside [0, 1]")]
    PixelRange(f64),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
    #[error("{0}")]
    NotFound(String),
    #[error("entry {image_id} ({bit_depth}-bit): {message}")]
    Entry {
        image_id: String,
        bit_depth: u8,
        message: String,
    },
    #[error("invalid dataset request: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path) -> impl FnOnce(FormatError) -> DatasetError + '_ {
    move |source| DatasetError::Format {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Fringe files

pub fn encode_fringe(frame: &SpectralFrame) -> Vec<u8> {
    let header = format!(
        "version={FRINGE_VERSION}\nnum_alines={}\nsamples_per_aline={}\nbit_depth={}\nk_grid_tag={}\nphantom_seed={}\nnoise_seed={}\n",
        frame.num_alines(),
        frame.samples_per_aline(),
        frame.bit_depth(),
        frame.k_grid_tag,
        frame.seeds.phantom,
        frame.seeds.noise,
    );
    let mut out = Vec::with_capacity(8 + header.len() + 2 * frame.samples().len());
    out.extend_from_slice(FRINGE_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for &v in frame.samples() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_fringe(bytes: &[u8]) -> Result<SpectralFrame, FormatError> {
    if bytes.len() < 8 {
        return Err(FormatError::Truncated {
            what: "fringe preamble",
            expected: 8,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != FRINGE_MAGIC {
        return Err(FormatError::BadMagic {
            expected: "OCTF".into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header_end = 8 + header_len;
    if bytes.len() < header_end {
        return Err(FormatError::Truncated {
            what: "fringe header",
            expected: header_end,
            actual: bytes.len(),
        });
    }
    let text = std::str::from_utf8(&bytes[8..header_end]).map_err(|e| FormatError::Header {
        offset: 8 + e.valid_up_to(),
        message: "header is not UTF-8".into(),
    })?;

    let mut fields = BTreeMap::new();
    let mut offset = 8;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_end_matches('\n');
        if !trimmed.is_empty() {
            let (key, value) = trimmed.split_once('=').ok_or_else(|| FormatError::Header {
                offset,
                message: format!("expected key=value, found {trimmed:?}"),
            })?;
            fields.insert(key.to_string(), (value.to_string(), offset));
        }
        offset += line.len();
    }
    let get = |key: &str| -> Result<&(String, usize), FormatError> {
        fields.get(key).ok_or_else(|| FormatError::Header {
            offset: header_end,
            message: format!("missing key {key:?}"),
        })
    };
    fn parse<T: std::str::FromStr>(key: &str, entry: &(String, usize)) -> Result<T, FormatError> {
        entry.0.parse().map_err(|_| FormatError::Header {
            offset: entry.1,
            message: format!("invalid {key} {:?}", entry.0),
        })
    }
    let version: u32 = parse("version", get("version")?)?;
    if version != FRINGE_VERSION {
        return Err(FormatError::Header {
            offset: get("version")?.1,
            message: format!("unsupported version {version}"),
        });
    }
    let num_alines: usize = parse("num_alines", get("num_alines")?)?;
    let samples_per_aline: usize = parse("samples_per_aline", get("samples_per_aline")?)?;
    let bit_depth: u8 = parse("bit_depth", get("bit_depth")?)?;
    if !(1..=NATIVE_BIT_DEPTH).contains(&bit_depth) {
        return Err(FormatError::Header {
            offset: get("bit_depth")?.1,
            message: format!("bit depth {bit_depth} outside 1..=12"),
        });
    }
    let k_grid_tag = get("k_grid_tag")?.0.clone();
    let seeds = FrameSeeds {
        phantom: parse("phantom_seed", get("phantom_seed")?)?,
        noise: parse("noise_seed", get("noise_seed")?)?,
    };

    let count = num_alines * samples_per_aline;
    let payload = &bytes[header_end..];
    let expected = 2 * count;
    if payload.len() < expected {
        return Err(FormatError::Truncated {
            what: "fringe payload",
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(FormatError::Trailing(payload.len() - expected));
    }
    let max = max_code(bit_depth);
    let mut samples = Vec::with_capacity(count);
    for (i, pair) in payload.chunks_exact(2).enumerate() {
        let value = u16::from_le_bytes([pair[0], pair[1]]);
        if value > max {
            return Err(FormatError::Range {
                offset: header_end + 2 * i,
                value,
                max,
                bit_depth,
            });
        }
        samples.push(value);
    }
    SpectralFrame::new(samples, samples_per_aline, num_alines, bit_depth, k_grid_tag)
        .map(|f| f.with_seeds(seeds))
        .map_err(|e| match e {
            FrameError::Shape { .. } => FormatError::Header {
                offset: 8,
                message: "empty frame".into(),
            },
            other => FormatError::Header {
                offset: 8,
                message: other.to_string(),
            },
        })
}

pub fn write_fringe(path: &Path, frame: &SpectralFrame) -> Result<(), DatasetError> {
    fs::write(path, encode_fringe(frame)).map_err(io_err(path))
}

pub fn read_fringe(path: &Path) -> Result<SpectralFrame, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_fringe(&bytes).map_err(format_err(path))
}

// ---------------------------------------------------------------------------
// Graymaps

/// Encode a `[0, 1]` image as a 16-bit binary graymap, with optional
/// `# key=value` comment lines after the magic number.
pub fn encode_graymap(image: &GrayImage, comments: &[(&str, String)]) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(32 + 2 * image.pixels().len());
    out.extend_from_slice(b"P5\n");
    for (key, value) in comments {
        out.extend_from_slice(format!("# {key}={value}\n").as_bytes());
    }
    out.extend_from_slice(format!("{} {}\n65535\n", image.width(), image.height()).as_bytes());
    for &v in image.pixels() {
        if !(0.0..=1.0).contains(&v) {
            return Err(FormatError::PixelRange(v));
        }
        out.extend_from_slice(&((v * GRAYMAP_MAX).round() as u16).to_be_bytes());
    }
    Ok(out)
}

/// Decoded graymap plus its `# key=value` comments.
pub fn decode_graymap(bytes: &[u8]) -> Result<(GrayImage, BTreeMap<String, String>), FormatError> {
    let err = |offset: usize, message: String| FormatError::Graymap { offset, message };
    let mut pos = 0;
    let mut comments = BTreeMap::new();

    // Header tokens separated by whitespace; `#` starts a comment to end of line.
    let mut next_token = |pos: &mut usize| -> Result<(usize, String), FormatError> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                let start = *pos;
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                let line = String::from_utf8_lossy(&bytes[start + 1..*pos]);
                if let Some((k, v)) = line.trim().split_once('=') {
                    comments.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
            *pos += 1;
        }
        if start == *pos {
            return Err(err(start, "unexpected end of header".into()));
        }
        Ok((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
    };

    let (at, magic) = next_token(&mut pos)?;
    if magic != "P5" {
        return Err(err(at, format!("expected P5, found {magic:?}")));
    }
    let mut number = |pos: &mut usize, what: &str| -> Result<usize, FormatError> {
        let (at, tok) = next_token(pos)?;
        tok.parse::<usize>()
            .map_err(|_| err(at, format!("invalid {what} {tok:?}")))
    };
    let width = number(&mut pos, "width")?;
    let height = number(&mut pos, "height")?;
    let maxval_at = pos;
    let maxval = number(&mut pos, "maxval")?;
    if maxval != 65535 {
        return Err(err(maxval_at, format!("expected maxval 65535, found {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(err(0, "zero image dimension".into()));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err(pos, "missing whitespace before raster".into()));
    }
    pos += 1;
    drop(next_token);

    let raster = &bytes[pos..];
    let expected = 2 * width * height;
    if raster.len() < expected {
        return Err(FormatError::Truncated {
            what: "graymap raster",
            expected,
            actual: raster.len(),
        });
    }
    if raster.len() > expected {
        return Err(FormatError::Trailing(raster.len() - expected));
    }
    let pixels = raster
        .chunks_exact(2)
        .map(|p| f64::from(u16::from_be_bytes([p[0], p[1]])) / GRAYMAP_MAX)
        .collect();
    let image = GrayImage::new(height, width, pixels).map_err(|e| err(pos, e.to_string()))?;
    Ok((image, comments))
}

pub fn write_bscan(path: &Path, bscan: &BScan) -> Result<(), DatasetError> {
    let comments = [
        ("bit_depth", bscan.bit_depth.to_string()),
        ("floor_db", bscan.window.floor_db.to_string()),
        ("ceil_db", bscan.window.ceil_db.to_string()),
    ];
    let bytes = encode_graymap(&bscan.image, &comments).map_err(format_err(path))?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// Read a graymap written by [`write_bscan`]. Metadata missing from the file
/// (e.g. an externally produced reconstruction) defaults to 12-bit and a
/// `[0, 1]` dB window.
pub fn read_bscan(path: &Path) -> Result<BScan, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (image, comments) = decode_graymap(&bytes).map_err(format_err(path))?;
    let num = |key: &str| comments.get(key).and_then(|v| v.parse::<f64>().ok());
    Ok(BScan {
        image,
        bit_depth: comments
            .get("bit_depth")
            .and_then(|v| v.parse().ok())
            .unwrap_or(NATIVE_BIT_DEPTH),
        window: DisplayWindow {
            floor_db: num("floor_db").unwrap_or(0.0),
            ceil_db: num("ceil_db").unwrap_or(1.0),
        },
    })
}

pub fn read_graymap(path: &Path) -> Result<GrayImage, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_graymap(&bytes).map(|(img, _)| img).map_err(format_err(path))
}

// ---------------------------------------------------------------------------
// Splits and manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (train, val, test)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            train: 8,
            val: 1,
            test: 1,
        }
    }
}

impl std::str::FromStr for SplitRatio {
    type Err = String;

    /// `train:val:test`, e.g. `8:1:1`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<u32> = s
            .split(':')
            .map(|p| p.trim().parse::<u32>())
            .collect::<Result<_, _>>()
            .map_err(|_| format!("invalid split ratio {s:?}"))?;
        match parts[..] {
            [train, val, test] if train + val + test > 0 => Ok(Self { train, val, test }),
            _ => Err(format!("split ratio {s:?} needs three parts with a positive sum")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitRatio {
    /// Frame counts per split: val and test rounded from the ratio, the
    /// remainder to train.
    pub fn counts(&self, frames: usize) -> SplitCounts {
        let total = f64::from(self.train + self.val + self.test);
        let share = |part: u32| (frames as f64 * f64::from(part) / total).round() as usize;
        let val = share(self.val).min(frames);
        let test = share(self.test).min(frames - val);
        SplitCounts {
            train: frames - val - test,
            val,
            test,
        }
    }
}

/// Frame-level split assignment: frame indices shuffled with `seed`, then
/// cut into train/val/test blocks.
pub fn assign_splits(frames: usize, ratio: SplitRatio, seed: u64) -> Vec<Split> {
    let counts = ratio.counts(frames);
    let mut order: Vec<usize> = (0..frames).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut splits = vec![Split::Train; frames];
    for (rank, &frame) in order.iter().enumerate() {
        splits[frame] = if rank < counts.train {
            Split::Train
        } else if rank < counts.train + counts.val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub bit_depth: u8,
    pub split: Split,
    /// Relative to the manifest directory.
    pub low_path: String,
    pub ref_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub dataset_id: String,
    /// Simulation settings the fringes came from, when known.
    #[serde(default)]
    pub phantom: Option<serde_json::Value>,
    #[serde(default)]
    pub optics: Option<serde_json::Value>,
    pub pipeline: PipelineConfig,
    pub pipeline_digest: String,
    pub bit_depths: Vec<u8>,
    pub split_seed: u64,
    pub split_ratio: SplitRatio,
    pub split_counts: SplitCounts,
    pub num_frames: usize,
    pub num_images: usize,
    pub entries: Vec<ManifestEntry>,
}

/// SHA-256 of the canonical JSON form of the resolved pipeline config.
pub fn pipeline_digest(config: &PipelineConfig) -> String {
    let json = serde_json::to_vec(config).expect("pipeline config serializes");
    hex::encode(Sha256::digest(&json))
}

impl DatasetManifest {
    /// True when the manifest was built with exactly this pipeline config.
    pub fn is_current(&self, config: &PipelineConfig) -> bool {
        self.pipeline_digest == pipeline_digest(config)
    }

    pub fn splits(&self) -> BTreeMap<String, Split> {
        self.entries
            .iter()
            .map(|e| (e.image_id.clone(), e.split))
            .collect()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let invalid = |m: String| Err(DatasetError::Invalid(m));
        if self.version != MANIFEST_VERSION {
            return invalid(format!("unsupported manifest version {}", self.version));
        }
        let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
        let mut ref_of: BTreeMap<&str, &str> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert((e.image_id.as_str(), e.bit_depth)) {
                return invalid(format!("duplicate entry {} at {} bits", e.image_id, e.bit_depth));
            }
            if *split_of.entry(&e.image_id).or_insert(e.split) != e.split {
                return invalid(format!("{} appears in more than one split", e.image_id));
            }
            if *ref_of.entry(&e.image_id).or_insert(&e.ref_path) != e.ref_path {
                return invalid(format!("{} has more than one reference", e.image_id));
            }
        }
        Ok(())
    }
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), DatasetError> {
    let mut json = serde_json::to_string_pretty(manifest).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    json.push('\n');
    fs::write(path, json).map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    manifest.validate()?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct DatasetOptions {
    pub dataset_id: String,
    pub bit_depths: Vec<u8>,
    /// Display window is recalibrated from the 12-bit references when
    /// `calibrate_window` is set; otherwise the config's window is used.
    pub pipeline: PipelineConfig,
    pub calibrate_window: bool,
    pub window_percentile: f64,
    pub window_range_db: f64,
    pub split_seed: u64,
    pub split_ratio: SplitRatio,
    pub phantom: Option<serde_json::Value>,
    pub optics: Option<serde_json::Value>,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            dataset_id: "lowbit-oct".into(),
            bit_depths: (3..=8).collect(),
            pipeline: PipelineConfig::default(),
            calibrate_window: true,
            window_percentile: 99.9,
            window_range_db: 50.0,
            split_seed: 0,
            split_ratio: SplitRatio::default(),
            phantom: None,
            optics: None,
        }
    }
}

pub fn reference_dir() -> &'static str {
    "ref"
}

pub fn depth_dir(bit_depth: u8) -> String {
    format!("bit{bit_depth}")
}

/// Process every frame at 12 bits and at each requested depth, write all
/// B-scans under `out_dir`, and write the manifest last.
///
/// `frames` are `(image_id, 12-bit frame)` pairs.
pub fn build_dataset(
    frames: &[(String, SpectralFrame)],
    options: &DatasetOptions,
    out_dir: &Path,
) -> Result<DatasetManifest, DatasetError> {
    if frames.is_empty() {
        return Err(DatasetError::Invalid("no frames".into()));
    }
    let mut depths = options.bit_depths.clone();
    depths.sort_unstable();
    depths.dedup();
    if depths.is_empty() {
        return Err(DatasetError::Invalid("no bit depths requested".into()));
    }
    if let Some(&bad) = depths.iter().find(|&&d| !(1..NATIVE_BIT_DEPTH).contains(&d)) {
        return Err(DatasetError::Invalid(format!("bit depth {bad} outside 1..=11")));
    }
    let ids: BTreeSet<&str> = frames.iter().map(|(id, _)| id.as_str()).collect();
    if ids.len() != frames.len() {
        return Err(DatasetError::Invalid("duplicate frame ids".into()));
    }
    options.pipeline.validate()?;

    let mut pipeline = options.pipeline.clone();
    if options.calibrate_window {
        let references = frames
            .par_iter()
            .map(|(_, f)| frame_to_magnitude(f, &pipeline))
            .collect::<Result<Vec<_>, _>>()?;
        let window = DisplayWindow::calibrate(&references, options.window_percentile, options.window_range_db)
            .ok_or_else(|| DatasetError::Invalid("empty reference magnitudes".into()))?;
        pipeline = pipeline.with_window(window);
    }

    for dir in std::iter::once(reference_dir().to_string()).chain(depths.iter().map(|&d| depth_dir(d))) {
        let path = out_dir.join(dir);
        fs::create_dir_all(&path).map_err(io_err(&path))?;
    }

    let splits = assign_splits(frames.len(), options.split_ratio, options.split_seed);
    let per_frame = frames
        .par_iter()
        .zip(splits.par_iter())
        .map(|((id, frame), &split)| -> Result<Vec<ManifestEntry>, DatasetError> {
            let ref_rel = format!("{}/{id}.pgm", reference_dir());
            write_bscan(&out_dir.join(&ref_rel), &process_frame(frame, &pipeline)?)?;
            depths
                .iter()
                .map(|&bits| {
                    let low = process_frame(&requantize(frame, bits)?, &pipeline)?;
                    let low_rel = format!("{}/{id}.pgm", depth_dir(bits));
                    write_bscan(&out_dir.join(&low_rel), &low)?;
                    Ok(ManifestEntry {
                        image_id: id.clone(),
                        bit_depth: bits,
                        split,
                        low_path: low_rel,
                        ref_path: ref_rel.clone(),
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut entries: Vec<ManifestEntry> = per_frame.into_iter().flatten().collect();
    entries.sort_by(|a, b| (&a.image_id, a.bit_depth).cmp(&(&b.image_id, b.bit_depth)));

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        dataset_id: options.dataset_id.clone(),
        phantom: options.phantom.clone(),
        optics: options.optics.clone(),
        pipeline_digest: pipeline_digest(&pipeline),
        pipeline,
        bit_depths: depths.clone(),
        split_seed: options.split_seed,
        split_ratio: options.split_ratio,
        split_counts: options.split_ratio.counts(frames.len()),
        num_frames: frames.len(),
        num_images: frames.len() * (depths.len() + 1),
        entries,
    };
    write_manifest(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A low-bit B-scan and its 12-bit reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub image_id: String,
    pub split: Split,
    pub low: BScan,
    pub reference: BScan,
}

/// Entries of one depth and split, sorted by image id.
pub fn select_entries(manifest: &DatasetManifest, bit_depth: u8, split: Split) -> Result<Vec<&ManifestEntry>, DatasetError> {
    if !manifest.bit_depths.contains(&bit_depth) {
        return Err(DatasetError::NotFound(format!(
            "bit depth {bit_depth} not in dataset (available: {:?})",
            manifest.bit_depths
        )));
    }
    let mut entries: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.bit_depth == bit_depth && e.split == split)
        .collect();
    entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(entries)
}

pub fn load_pairs(manifest: &DatasetManifest, root: &Path, bit_depth: u8, split: Split) -> Result<Vec<ImagePair>, DatasetError> {
    select_entries(manifest, bit_depth, split)?
        .into_iter()
        .map(|e| {
            let entry_err = |message: String| DatasetError::Entry {
                image_id: e.image_id.clone(),
                bit_depth: e.bit_depth,
                message,
            };
            let read = |rel: &str| read_bscan(&root.join(rel)).map_err(|err| entry_err(err.to_string()));
            let low = read(&e.low_path)?;
            let reference = read(&e.ref_path)?;
            if low.image.shape() != reference.image.shape() {
                return Err(entry_err(format!(
                    "dimension mismatch: low {:?} vs reference {:?}",
                    low.image.shape(),
                    reference.image.shape()
                )));
            }
            Ok(ImagePair {
                image_id: e.image_id.clone(),
                split: e.split,
                low,
                reference,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Metric tables

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub image_id: String,
    pub bit_depth: u8,
    pub source: Source,
    pub psnr_db: String,
    pub msssim: String,
    pub corr2: String,
}

impl From<&MetricRow> for MetricRecord {
    fn from(row: &MetricRow) -> Self {
        Self {
            image_id: row.image_id.clone(),
            bit_depth: row.bit_depth,
            source: row.source,
            psnr_db: row.psnr.to_string(),
            msssim: row.msssim.to_string(),
            corr2: row.corr2.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}")),
        }
    }
}

/// One aggregate row; empty fields mean no valid values in the group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub bit_depth: u8,
    pub source: Source,
    pub count: usize,
    pub psnr_mean: Option<f64>,
    pub psnr_std: Option<f64>,
    pub psnr_n: usize,
    pub psnr_identical: usize,
    pub msssim_mean: Option<f64>,
    pub msssim_std: Option<f64>,
    pub msssim_n: usize,
    pub msssim_invalid: usize,
    pub corr2_mean: Option<f64>,
    pub corr2_std: Option<f64>,
    pub corr2_n: usize,
    pub corr2_undefined: usize,
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

impl From<&GroupSummary> for AggregateRecord {
    fn from(g: &GroupSummary) -> Self {
        let split = |s: Option<Summary>| match s {
            Some(s) => (Some(round6(s.mean)), Some(round6(s.std)), s.n),
            None => (None, None, 0),
        };
        let (psnr_mean, psnr_std, psnr_n) = split(g.psnr);
        let (msssim_mean, msssim_std, msssim_n) = split(g.msssim);
        let (corr2_mean, corr2_std, corr2_n) = split(g.corr2);
        Self {
            bit_depth: g.bit_depth,
            source: g.source,
            count: g.count,
            psnr_mean,
            psnr_std,
            psnr_n,
            psnr_identical: g.psnr_identical,
            msssim_mean,
            msssim_std,
            msssim_n,
            msssim_invalid: g.msssim_invalid,
            corr2_mean,
            corr2_std,
            corr2_n,
            corr2_undefined: g.corr2_undefined,
        }
    }
}

/// Long-format series for plotting metric vs bit depth, one line per source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRecord {
    pub metric: String,
    pub source: Source,
    pub bit_depth: u8,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn plot_records(groups: &[GroupSummary]) -> Vec<PlotRecord> {
    let mut out = Vec::new();
    for (metric, pick) in [
        ("psnr_db", (|g: &GroupSummary| g.psnr) as fn(&GroupSummary) -> Option<Summary>),
        ("msssim", |g| g.msssim),
        ("corr2", |g| g.corr2),
    ] {
        let mut sorted: Vec<&GroupSummary> = groups.iter().collect();
        sorted.sort_by_key(|g| (g.source, g.bit_depth));
        for g in sorted {
            if let Some(s) = pick(g) {
                out.push(PlotRecord {
                    metric: metric.to_string(),
                    source: g.source,
                    bit_depth: g.bit_depth,
                    mean: round6(s.mean),
                    std: round6(s.std),
                    n: s.n,
                });
            }
        }
    }
    out
}

pub fn write_csv<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<(), DatasetError> {
    let csv_err = |source| DatasetError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        writer.serialize(r).map_err(csv_err)?;
    }
    writer.flush().map_err(io_err(path))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let csv_err = |source| DatasetError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    reader.deserialize().collect::<Result<Vec<T>, _>>().map_err(csv_err)
}

/// Write `bytes` through a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    file.write_all(bytes).map_err(io_err(&tmp))?;
    file.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}
