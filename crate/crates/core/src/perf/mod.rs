//! Latency/FPS measurement, face-count sweeps, report files, and detection
//! average precision.

mod ap;
pub mod pipeline;

pub use ap::{
    average_precision, evaluate_sets, Difficulty, DifficultyFilter, GroundTruthImage,
    GroundTruthSet, GtBox, ScoredBox,
};

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infer::Precision;

pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_FRAMES: usize = 100;

/// Samples shorter than this (an empty stage body) are recorded at this
/// value so FPS stays finite.
const MIN_SAMPLE_MS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("frames must be at least 1")]
    ZeroFrames,
    #[error("stage failed on iteration {iteration}: {source}")]
    Stage {
        iteration: usize,
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("empty ground truth")]
    EmptyGroundTruth,
    #[error("malformed ground truth: {0}")]
    GroundTruth(String),
    #[error("iou threshold {0} outside (0, 1)")]
    IouThreshold(f64),
    #[error("invalid box {0:?}")]
    InvalidBox([f64; 4]),
    #[error("non-finite detection score")]
    BadScore,
    #[error("report csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Detect,
    Embed,
    Pipeline,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Detect => "detect",
            Stage::Embed => "embed",
            Stage::Pipeline => "pipeline",
        })
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "detect" => Ok(Stage::Detect),
            "embed" => Ok(Stage::Embed),
            "pipeline" => Ok(Stage::Pipeline),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

/// Summary statistics in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub min: f64,
    pub max: f64,
}

/// Nearest-rank percentile of sorted samples: element `ceil(p/100 * n)`
/// (1-based).
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl LatencyStats {
    pub fn from_samples(samples_ms: &[f64]) -> Option<Self> {
        if samples_ms.is_empty() {
            return None;
        }
        let mut sorted = samples_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            mean: samples_ms.iter().sum::<f64>() / samples_ms.len() as f64,
            p50: nearest_rank(&sorted, 50.0),
            p90: nearest_rank(&sorted, 90.0),
            p99: nearest_rank(&sorted, 99.0),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
        })
    }
}

/// Mean milliseconds spent in each detector sub-step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub pre_ms: f64,
    pub forward_ms: f64,
    pub post_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub stage: Stage,
    pub precision: Precision,
    pub faces_per_frame: usize,
    pub frames: usize,
    pub latency_ms: LatencyStats,
    /// `1000 / mean`.
    pub fps: f64,
    /// `1000 / p50`, less sensitive to stragglers.
    pub fps_p50: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<Breakdown>,
}

/// What is being measured; the labels end up in the report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSpec {
    pub stage: Stage,
    pub precision: Precision,
    pub faces_per_frame: usize,
    pub warmup: usize,
    pub frames: usize,
}

impl PerfReport {
    pub fn from_samples(spec: &BenchSpec, samples_ms: &[f64]) -> Result<Self, PerfError> {
        let latency_ms = LatencyStats::from_samples(samples_ms).ok_or(PerfError::ZeroFrames)?;
        Ok(Self::from_stats(
            spec.stage,
            spec.precision,
            spec.faces_per_frame,
            samples_ms.len(),
            latency_ms,
        ))
    }

    fn from_stats(
        stage: Stage,
        precision: Precision,
        faces: usize,
        frames: usize,
        latency_ms: LatencyStats,
    ) -> Self {
        Self {
            stage,
            precision,
            faces_per_frame: faces,
            frames,
            fps: 1000.0 / latency_ms.mean,
            fps_p50: 1000.0 / latency_ms.p50,
            latency_ms,
            breakdown: None,
        }
    }

    /// Mean-latency ratio `self / faster`.
    pub fn speedup_over(&self, faster: &PerfReport) -> f64 {
        self.latency_ms.mean / faster.latency_ms.mean
    }
}

pub(crate) fn duration_ms(d: Duration) -> f64 {
    (d.as_secs_f64() * 1000.0).max(MIN_SAMPLE_MS)
}

/// Runs `stage` `warmup` times untimed, then times `frames` calls with a
/// monotonic clock. The first failing call aborts the whole measurement.
pub fn measure<F, E>(spec: &BenchSpec, mut stage: F) -> Result<PerfReport, PerfError>
where
    F: FnMut() -> Result<(), E>,
    E: Into<Box<dyn std::error::Error + Send + Sync>>,
{
    if spec.frames == 0 {
        return Err(PerfError::ZeroFrames);
    }
    let fail = |iteration, e: E| PerfError::Stage {
        iteration,
        source: e.into(),
    };
    for i in 0..spec.warmup {
        stage().map_err(|e| fail(i, e))?;
    }
    let mut samples = Vec::with_capacity(spec.frames);
    for i in 0..spec.frames {
        let t0 = Instant::now();
        stage().map_err(|e| fail(spec.warmup + i, e))?;
        samples.push(duration_ms(t0.elapsed()));
    }
    PerfReport::from_samples(spec, &samples)
}

/// One embed-stage report per face count; `embed_k(k)` must embed `k`
/// aligned faces.
pub fn sweep_faces<F, E>(
    mut embed_k: F,
    face_counts: &[usize],
    precision: Precision,
    warmup: usize,
    frames: usize,
) -> Result<Vec<PerfReport>, PerfError>
where
    F: FnMut(usize) -> Result<(), E>,
    E: Into<Box<dyn std::error::Error + Send + Sync>>,
{
    face_counts
        .iter()
        .map(|&k| {
            let spec = BenchSpec {
                stage: Stage::Embed,
                precision,
                faces_per_frame: k,
                warmup,
                frames,
            };
            measure(&spec, || embed_k(k))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

pub const CSV_COLUMNS: [&str; 11] = [
    "stage",
    "precision",
    "faces",
    "frames",
    "mean_ms",
    "p50",
    "p90",
    "p99",
    "min",
    "max",
    "fps",
];

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    stage: Stage,
    precision: Precision,
    faces: usize,
    frames: usize,
    mean_ms: f64,
    p50: f64,
    p90: f64,
    p99: f64,
    min: f64,
    max: f64,
    fps: f64,
}

/// CSV holds the table columns only; `fps_p50` is recomputed on reading and
/// the breakdown is dropped.
pub fn write_csv<W: Write>(reports: &[PerfReport], out: W) -> Result<(), PerfError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in reports {
        let l = r.latency_ms;
        w.serialize(CsvRow {
            stage: r.stage,
            precision: r.precision,
            faces: r.faces_per_frame,
            frames: r.frames,
            mean_ms: l.mean,
            p50: l.p50,
            p90: l.p90,
            p99: l.p99,
            min: l.min,
            max: l.max,
            fps: r.fps,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<PerfReport>, PerfError> {
    let mut rd = csv::Reader::from_reader(input);
    rd.deserialize::<CsvRow>()
        .map(|row| {
            let row = row?;
            let stats = LatencyStats {
                mean: row.mean_ms,
                p50: row.p50,
                p90: row.p90,
                p99: row.p99,
                min: row.min,
                max: row.max,
            };
            let mut r =
                PerfReport::from_stats(row.stage, row.precision, row.faces, row.frames, stats);
            r.fps = row.fps;
            Ok(r)
        })
        .collect()
}

pub fn emit_report(
    reports: &[PerfReport],
    format: ReportFormat,
    path: impl AsRef<Path>,
) -> Result<(), PerfError> {
    let mut buf = Vec::new();
    match format {
        ReportFormat::Csv => write_csv(reports, &mut buf)?,
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut buf, reports)?;
            buf.push(b'\n');
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_report(
    format: ReportFormat,
    path: impl AsRef<Path>,
) -> Result<Vec<PerfReport>, PerfError> {
    let bytes = std::fs::read(path)?;
    match format {
        ReportFormat::Csv => read_csv(bytes.as_slice()),
        ReportFormat::Json => Ok(serde_json::from_slice(&bytes)?),
    }
}
