//! The `facepipe` command line.
//!
//! Exit codes: 0 ok, 1 generic failure, 2 model problem, 3 bad input,
//! 4 no face found, 5 usage / invalid configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::align::{align_face, crop_resize, ALIGNED_SIZE};
use crate::config::{Config, ConfigError};
use crate::detect::{detect_faces, DetectionFile};
use crate::fixtures;
use crate::imageio::{load_image, save_png, save_ppm};
use crate::infer::{calibrate_and_quantize, load_model, save_model, Model, Precision};
use crate::perf::pipeline::{pipeline_threads, Pipeline, PipelineConfig, PipelineError};
use crate::perf::{
    emit_report, evaluate_sets, measure, sweep_faces, BenchSpec, Breakdown, Difficulty,
    DifficultyFilter, GroundTruthImage, GroundTruthSet, PerfError, PerfReport, ReportFormat, Stage,
};
use crate::recognize::{Gallery, RecognizeError};
use crate::tensor::{normalize_to_tensor, Image};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Model(String),
    #[error("{0}")]
    Input(String),
    #[error("no face found in {0}")]
    NoFace(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Model(_) => 2,
            CliError::Input(_) => 3,
            CliError::NoFace(_) => 4,
            CliError::Usage(_) => 5,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Recognize(RecognizeError::AlignedSize { .. }) => {
                CliError::Model(e.to_string())
            }
            PipelineError::Detect(_) | PipelineError::Recognize(RecognizeError::Infer(_)) => {
                CliError::Model(e.to_string())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<PerfError> for CliError {
    fn from(e: PerfError) -> Self {
        match e {
            PerfError::EmptyGroundTruth
            | PerfError::GroundTruth(_)
            | PerfError::InvalidBox(_)
            | PerfError::BadScore => CliError::Input(e.to_string()),
            PerfError::ZeroFrames | PerfError::IouThreshold(_) => CliError::Usage(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "facepipe",
    version,
    about = "Face detection, alignment, recognition and benchmarking"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect faces and write Detection JSON.
    Detect(DetectArgs),
    /// Add the highest-scoring face of an image to a gallery.
    Enroll(EnrollArgs),
    /// Match every face of an image against a gallery, one JSON line per face.
    Identify(IdentifyArgs),
    /// Latency / FPS benchmark on synthetic frames.
    Bench(BenchArgs),
    /// Average precision of detections against ground truth.
    EvalAp(EvalApArgs),
    /// Calibrate an f32 embedder on sample images and write an int8 model.
    Quantize(QuantizeArgs),
    /// Write the fixture models, sample frames and a config into a directory.
    Fixtures(FixturesArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// TOML config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Detector FTM file.
    #[arg(long)]
    pub detector: Option<PathBuf>,
    /// Embedder FTM file (must be quantized for `--precision i8`).
    #[arg(long)]
    pub embedder: Option<PathBuf>,
    /// Stretch the detection box instead of five-point alignment.
    #[arg(long)]
    pub no_align: bool,
    #[arg(long)]
    pub conf: Option<f64>,
    #[arg(long)]
    pub iou: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Detector FTM file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub conf: Option<f64>,
    #[arg(long)]
    pub iou: Option<f64>,
    /// Output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write each face's aligned 112x112 crop as a PNG into this directory.
    #[arg(long)]
    pub dump_aligned: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnrollArgs {
    #[command(flatten)]
    pub models: ModelArgs,
    #[arg(long)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub id: String,
    /// Display name; defaults to the id.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    #[command(flatten)]
    pub models: ModelArgs,
    #[arg(long)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BenchPrecision {
    F32,
    I8,
    Both,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub models: ModelArgs,
    #[arg(long, value_parser = ["detect", "embed", "pipeline"], default_value = "pipeline")]
    pub mode: String,
    /// Faces per frame: `K`, an inclusive range `a..b`, or a list `a,b,c`.
    #[arg(long, default_value = "1")]
    pub faces: String,
    #[arg(long = "precision", value_enum, default_value = "f32")]
    pub bench_precision: BenchPrecision,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub frames: Option<u64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct EvalApArgs {
    /// Detection JSON: one document or an array of them.
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub ground_truth: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    #[arg(long, default_value = "all")]
    pub difficulty: DifficultyFilter,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Calibration images, each resized to the model input.
    #[arg(long, num_args = 1.., required = true)]
    pub calib: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FixturesArgs {
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `K`, `a..b` (inclusive) or `a,b,c`.
pub fn parse_face_counts(s: &str) -> Result<Vec<usize>, String> {
    let bad = || format!("invalid face count {s:?} (use K, a..b or a,b,c)");
    let counts: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    };
    if counts.is_empty() {
        return Err(bad());
    }
    Ok(counts)
}

fn read_model(path: &Path) -> Result<Model, CliError> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Model(format!("model not found: {}", path.display()))
        } else {
            CliError::Model(format!("reading model {}: {e}", path.display()))
        }
    })?;
    let model =
        load_model(&bytes).map_err(|e| CliError::Model(format!("{}: {e}", path.display())))?;
    log::info!(
        "loaded {} ({} layers, {} heads, quantized: {})",
        path.display(),
        model.layers().len(),
        model.heads().len(),
        model.is_quantized()
    );
    Ok(model)
}

fn read_image(path: &Path) -> Result<Image, CliError> {
    load_image(path).map_err(|e| CliError::Input(e.to_string()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Other(format!("writing {}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    Ok(match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    })
}

/// Config plus flag overrides, validated before any model is touched.
fn resolve(models: &ModelArgs, precision: Option<Precision>) -> Result<Config, CliError> {
    let mut cfg = load_config(models.config.as_deref())?;
    if let Some(p) = &models.detector {
        cfg.detector.model_path = p.clone();
    }
    if let Some(p) = &models.embedder {
        cfg.embedder.model_path = p.clone();
    }
    if let Some(p) = precision {
        cfg.embedder.precision = p;
    }
    if models.no_align {
        cfg.embedder.align = false;
    }
    if let Some(c) = models.conf {
        cfg.detector.conf_thresh = c;
    }
    if let Some(i) = models.iou {
        cfg.detector.iou_thresh = i;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_detector(cfg: &Config) -> Result<Model, CliError> {
    let m = read_model(&cfg.detector.model_path)?;
    let n = cfg.detector.input_size;
    if m.input_shape() != [1, 3, n, n] {
        return Err(CliError::Model(format!(
            "detector input {:?} does not match configured input_size {n}",
            m.input_shape()
        )));
    }
    Ok(m)
}

fn load_embedder(cfg: &Config, precision: Precision) -> Result<Model, CliError> {
    let m = read_model(&cfg.embedder.model_path)?;
    if m.embedding_dim() != cfg.embedder.embedding_dim {
        return Err(CliError::Model(format!(
            "embedder produces {} values, config expects {}",
            m.embedding_dim(),
            cfg.embedder.embedding_dim
        )));
    }
    match (precision, m.is_quantized()) {
        (Precision::I8, false) => Err(CliError::Model(format!(
            "{} is not quantized; create an int8 model with `facepipe quantize`",
            cfg.embedder.model_path.display()
        ))),
        (Precision::F32, true) => Err(CliError::Model(format!(
            "{} is quantized; pass --precision i8",
            cfg.embedder.model_path.display()
        ))),
        _ => Ok(m),
    }
}

fn pipeline_config(cfg: &Config) -> PipelineConfig {
    PipelineConfig {
        detector: cfg.detector.params(),
        precision: cfg.embedder.precision,
        align: cfg.embedder.align,
        template: cfg.embedder.template(),
        threshold: cfg.verify.threshold,
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn cmd_detect(args: &DetectArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(p) = &args.model {
        cfg.detector.model_path = p.clone();
    }
    if let Some(c) = args.conf {
        cfg.detector.conf_thresh = c;
    }
    if let Some(i) = args.iou {
        cfg.detector.iou_thresh = i;
    }
    cfg.validate()?;
    let detector = load_detector(&cfg)?;
    let img = read_image(&args.input)?;
    let detections = detect_faces(&detector, &img, &cfg.detector.params())
        .map_err(|e| CliError::Model(e.to_string()))?;
    let doc = DetectionFile {
        image: args.input.display().to_string(),
        width: img.width(),
        height: img.height(),
        detections,
    };
    if let Some(dir) = &args.dump_aligned {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Other(format!("creating {}: {e}", dir.display())))?;
        for (k, d) in doc.detections.iter().enumerate() {
            let crop = if cfg.embedder.align {
                align_face(&img, d, &cfg.embedder.template())
                    .map_err(|e| CliError::Other(e.to_string()))?
                    .image
            } else {
                crop_resize(&img, &d.bbox, ALIGNED_SIZE, ALIGNED_SIZE)
                    .map_err(|e| CliError::Other(e.to_string()))?
            };
            let path = dir.join(format!("face_{k}.png"));
            save_png(&crop, &path).map_err(|e| CliError::Other(e.to_string()))?;
        }
    }
    let text = serde_json::to_string_pretty(&doc).expect("serializable") + "\n";
    match &args.out {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_gallery(path: &Path, dim: usize) -> Result<Gallery, CliError> {
    if !path.exists() {
        log::warn!("gallery {} does not exist; starting empty", path.display());
        return Ok(Gallery::new(dim));
    }
    let g = Gallery::load(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if g.dim() != dim {
        return Err(CliError::Input(format!(
            "gallery holds {}-d embeddings, embedder produces {dim}",
            g.dim()
        )));
    }
    Ok(g)
}

fn cmd_enroll(args: &EnrollArgs) -> Result<(), CliError> {
    let cfg = resolve(&args.models, args.precision)?;
    let detector = load_detector(&cfg)?;
    let embedder = load_embedder(&cfg, cfg.embedder.precision)?;
    let mut gallery = read_gallery(&args.gallery, embedder.embedding_dim())?;
    let img = read_image(&args.input)?;
    let pipe = Pipeline::new(&detector, &embedder, pipeline_config(&cfg));
    let (dets, _) = pipe.detect(&img)?;
    let best = dets
        .iter()
        .max_by(|a, b| a.score.total_cmp(&b.score))
        .ok_or_else(|| CliError::NoFace(args.input.display().to_string()))?;
    if dets.len() > 1 {
        log::warn!(
            "{} faces in {}; enrolling the top-scoring one",
            dets.len(),
            args.input.display()
        );
    }
    let emb = pipe.embed(&pipe.crop(&img, best)?)?;
    let name = args.name.as_deref().unwrap_or(&args.id);
    gallery
        .enroll(&args.id, name, emb)
        .map_err(|e| CliError::Input(e.to_string()))?;
    gallery
        .save(&args.gallery)
        .map_err(|e| CliError::Other(format!("saving gallery: {e}")))?;
    log::info!(
        "enrolled {} into {} ({} ids)",
        args.id,
        args.gallery.display(),
        gallery.len()
    );
    Ok(())
}

fn cmd_identify(args: &IdentifyArgs) -> Result<(), CliError> {
    let mut cfg = resolve(&args.models, args.precision)?;
    if let Some(t) = args.threshold {
        cfg.verify.threshold = t;
        cfg.validate()?;
    }
    let detector = load_detector(&cfg)?;
    let embedder = load_embedder(&cfg, cfg.embedder.precision)?;
    let gallery = read_gallery(&args.gallery, embedder.embedding_dim())?;
    let img = read_image(&args.input)?;
    let pipe = Pipeline::new(&detector, &embedder, pipeline_config(&cfg));
    let results = pipe.process_frame(&img, &gallery)?;
    if results.is_empty() {
        return Err(CliError::NoFace(args.input.display().to_string()));
    }
    for r in &results {
        println!("{}", to_json(r));
    }
    Ok(())
}

/// Aligned crops of `count` distinct fixture faces (cycling through the
/// slots of a full frame when `count` exceeds them).
fn workload_crops(pipe: &Pipeline, count: usize) -> Result<Vec<Image>, CliError> {
    let n = count.clamp(1, fixtures::FACE_SLOTS.len());
    let frame = fixtures::frame_with_faces(n);
    let (dets, _) = pipe.detect(&frame)?;
    if dets.is_empty() {
        return Err(CliError::Model(
            "detector found no faces in the synthetic frame".into(),
        ));
    }
    let crops: Vec<Image> = dets
        .iter()
        .map(|d| pipe.crop(&frame, d))
        .collect::<Result<_, _>>()?;
    Ok((0..count).map(|k| crops[k % crops.len()].clone()).collect())
}

fn bench_one(
    cfg: &Config,
    detector: &Model,
    embedder: &Model,
    spec: BenchSpec,
) -> Result<PerfReport, CliError> {
    let BenchSpec {
        stage,
        precision,
        faces_per_frame: faces,
        warmup,
        frames,
    } = spec;
    let mut pcfg = pipeline_config(cfg);
    pcfg.precision = precision;
    let pipe = Pipeline::new(detector, embedder, pcfg);
    let slots = fixtures::FACE_SLOTS.len();
    if stage != Stage::Embed && faces > slots {
        return Err(CliError::Usage(format!(
            "synthetic frames hold at most {slots} faces"
        )));
    }
    match stage {
        Stage::Detect => {
            let frame = fixtures::frame_with_faces(faces);
            let mut sums = [0.0f64; 3];
            let mut timed = 0usize;
            let mut report = measure(&spec, || {
                let (_, t) = pipe.detect(&frame)?;
                timed += 1;
                if timed > warmup {
                    sums[0] += t.pre.as_secs_f64();
                    sums[1] += t.forward.as_secs_f64();
                    sums[2] += t.post.as_secs_f64();
                }
                Ok::<_, PipelineError>(())
            })?;
            let ms = |s: f64| s * 1000.0 / frames as f64;
            report.breakdown = Some(Breakdown {
                pre_ms: ms(sums[0]),
                forward_ms: ms(sums[1]),
                post_ms: ms(sums[2]),
            });
            Ok(report)
        }
        Stage::Embed => {
            let crops = workload_crops(&pipe, faces)?;
            let mut reports = sweep_faces(
                |k| {
                    for c in &crops[..k] {
                        pipe.embed(c)?;
                    }
                    Ok::<_, PipelineError>(())
                },
                &[faces],
                precision,
                warmup,
                frames,
            )?;
            Ok(reports.remove(0))
        }
        Stage::Pipeline => {
            let identities: Vec<u64> = (0..faces as u64).collect();
            let frame = fixtures::synthetic_frame(&identities);
            let mut gallery = Gallery::new(embedder.embedding_dim());
            let (dets, _) = pipe.detect(&frame)?;
            for (k, d) in dets.iter().enumerate() {
                let e = pipe.embed(&pipe.crop(&frame, d)?)?;
                gallery
                    .enroll(&format!("person{k}"), &format!("Person {k}"), e)
                    .map_err(|e| CliError::Other(e.to_string()))?;
            }
            if pipeline_threads() >= 2 {
                let batch = vec![frame; warmup + frames];
                let timed = pipe.run_overlapped(&batch, &gallery)?;
                let samples: Vec<f64> = timed[warmup..]
                    .iter()
                    .map(|(_, d)| crate::perf::duration_ms(*d))
                    .collect();
                Ok(PerfReport::from_samples(&spec, &samples)?)
            } else {
                Ok(measure(&spec, || {
                    pipe.process_frame(&frame, &gallery).map(|_| ())
                })?)
            }
        }
    }
}

fn calibration_tensors(
    model: &Model,
    images: &[Image],
) -> Result<Vec<crate::tensor::Tensor>, CliError> {
    let (h, w) = match *model.input_shape() {
        [1, 3, h, w] => (h, w),
        ref s => {
            return Err(CliError::Model(format!(
                "cannot calibrate a model with input {s:?}"
            )))
        }
    };
    images
        .iter()
        .map(|img| {
            let full = [0.0, 0.0, img.width() as f64, img.height() as f64];
            let r = crop_resize(img, &full, w, h).map_err(|e| CliError::Input(e.to_string()))?;
            Ok(normalize_to_tensor(&r))
        })
        .collect()
}

fn quantize_on(model: &Model, crops: &[Image]) -> Result<Model, CliError> {
    let samples = calibration_tensors(model, crops)?;
    calibrate_and_quantize(model, &samples).map_err(|e| CliError::Model(e.to_string()))
}

fn cmd_bench(args: &BenchArgs) -> Result<(), CliError> {
    let mut cfg = resolve(&args.models, None)?;
    if let Some(f) = args.frames {
        cfg.bench.frames = f as usize;
    }
    if let Some(w) = args.warmup {
        cfg.bench.warmup = w;
    }
    cfg.validate()?;
    let counts = parse_face_counts(&args.faces).map_err(CliError::Usage)?;
    let stage: Stage = args.mode.parse().map_err(CliError::Usage)?;
    let precisions: Vec<Precision> = match args.bench_precision {
        BenchPrecision::F32 => vec![Precision::F32],
        BenchPrecision::I8 => vec![Precision::I8],
        BenchPrecision::Both => vec![Precision::F32, Precision::I8],
    };
    if stage == Stage::Detect && precisions.contains(&Precision::I8) {
        return Err(CliError::Usage("the detector runs in f32 only".into()));
    }

    let detector = load_detector(&cfg)?;
    let loaded = read_model(&cfg.embedder.model_path)?;
    let (f32_embedder, i8_embedder) = if loaded.is_quantized() {
        if precisions.contains(&Precision::F32) {
            return Err(CliError::Model(format!(
                "{} is quantized; f32 benchmarking needs the float model",
                cfg.embedder.model_path.display()
            )));
        }
        (None, Some(loaded))
    } else if precisions.contains(&Precision::I8) && stage != Stage::Detect {
        // calibrate on the very crops the benchmark feeds the embedder
        let probe = Pipeline::new(&detector, &loaded, pipeline_config(&cfg));
        let crops = workload_crops(&probe, fixtures::FACE_SLOTS.len())?;
        let q = quantize_on(&loaded, &crops)?;
        (Some(loaded), Some(q))
    } else {
        (Some(loaded), None)
    };

    let mut reports = Vec::new();
    for &p in &precisions {
        let embedder = match p {
            Precision::F32 => f32_embedder.as_ref(),
            Precision::I8 => i8_embedder.as_ref(),
        }
        .expect("selected above");
        for &k in &counts {
            let spec = BenchSpec {
                stage,
                precision: p,
                faces_per_frame: k,
                warmup: cfg.bench.warmup,
                frames: cfg.bench.frames,
            };
            let r = bench_one(&cfg, &detector, embedder, spec)?;
            println!(
                "{:<8} {:<3} faces={:<3} mean={:.3}ms p50={:.3}ms p99={:.3}ms fps={:.1}",
                r.stage,
                r.precision,
                r.faces_per_frame,
                r.latency_ms.mean,
                r.latency_ms.p50,
                r.latency_ms.p99,
                r.fps
            );
            reports.push(r);
        }
    }
    if let Some(path) = &args.report {
        emit_report(&reports, args.format, path)?;
    }
    Ok(())
}

fn read_detection_files(path: &Path) -> Result<Vec<DetectionFile>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let parsed = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|d| vec![d])
    };
    parsed.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn cmd_eval_ap(args: &EvalApArgs) -> Result<(), CliError> {
    if !(args.iou > 0.0 && args.iou < 1.0) {
        return Err(CliError::Usage(format!(
            "--iou {} must lie in (0, 1)",
            args.iou
        )));
    }
    let dets = read_detection_files(&args.detections)?;
    let text = fs::read_to_string(&args.ground_truth)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.ground_truth.display())))?;
    let gt: GroundTruthSet = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.ground_truth.display())))?;
    let ap = evaluate_sets(&dets, &gt, args.difficulty, args.iou)?;
    println!("{}", serde_json::json!({ "ap": ap }));
    Ok(())
}

fn cmd_quantize(args: &QuantizeArgs) -> Result<(), CliError> {
    let model = read_model(&args.model)?;
    if model.is_quantized() {
        return Err(CliError::Model(format!(
            "{} is already quantized",
            args.model.display()
        )));
    }
    let images: Vec<Image> = args
        .calib
        .iter()
        .map(|p| read_image(p))
        .collect::<Result<_, _>>()?;
    let q = quantize_on(&model, &images)?;
    write_file(&args.out, &save_model(&q))
}

fn cmd_fixtures(args: &FixturesArgs) -> Result<(), CliError> {
    let out = &args.out;
    let frames = out.join("frames");
    let crops_dir = out.join("calib");
    for d in [out, &frames, &crops_dir] {
        fs::create_dir_all(d)
            .map_err(|e| CliError::Other(format!("creating {}: {e}", d.display())))?;
    }
    let other = |e: crate::infer::InferError| CliError::Other(e.to_string());
    let detector = fixtures::detector_model(fixtures::FRAME_SIZE).map_err(other)?;
    let embedder = fixtures::embedder_model(fixtures::EMBEDDER_SEED).map_err(other)?;
    write_file(&out.join("detector.ftm"), &save_model(&detector))?;
    write_file(&out.join("embedder.ftm"), &save_model(&embedder))?;

    let save = |img: &Image, path: PathBuf| {
        save_ppm(img, &path).map_err(|e| CliError::Other(e.to_string()))
    };
    for id in 0..3u64 {
        save(
            &fixtures::synthetic_frame(&[id]),
            frames.join(format!("person{id}.ppm")),
        )?;
    }
    let group: Vec<u64> = (0..5).collect();
    save(&fixtures::synthetic_frame(&group), frames.join("group.ppm"))?;
    save(&fixtures::frame_with_faces(0), frames.join("blank.ppm"))?;

    let gt = GroundTruthSet {
        images: vec![GroundTruthImage {
            image: frames.join("group.ppm").display().to_string(),
            boxes: (0..group.len()).map(fixtures::slot_box).collect(),
            difficulty: (0..group.len())
                .map(|k| {
                    if k % 2 == 0 {
                        Difficulty::Easy
                    } else {
                        Difficulty::Hard
                    }
                })
                .collect(),
        }],
    };
    write_file(
        &out.join("gt.json"),
        (serde_json::to_string_pretty(&gt).expect("serializable") + "\n").as_bytes(),
    )?;

    let cfg = Config::default();
    let pipe = Pipeline::new(&detector, &embedder, pipeline_config(&cfg));
    let crops = workload_crops(&pipe, fixtures::FACE_SLOTS.len())?;
    for (k, c) in crops.iter().enumerate() {
        save(c, crops_dir.join(format!("crop{k:02}.ppm")))?;
    }
    let q = quantize_on(&embedder, &crops)?;
    write_file(&out.join("embedder-i8.ftm"), &save_model(&q))?;

    let mut cfg = Config::default();
    cfg.detector.model_path = "detector.ftm".into();
    cfg.embedder.model_path = "embedder.ftm".into();
    cfg.bench.frames = 30;
    write_file(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Detect(a) => cmd_detect(a),
        Command::Enroll(a) => cmd_enroll(a),
        Command::Identify(a) => cmd_identify(a),
        Command::Bench(a) => cmd_bench(a),
        Command::EvalAp(a) => cmd_eval_ap(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Fixtures(a) => cmd_fixtures(a),
    }
}

/// Entry point of the binary: parses arguments, runs, maps errors to exit
/// codes.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 5 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn face_count_grammar() {
        assert_eq!(parse_face_counts("3").unwrap(), vec![3]);
        assert_eq!(parse_face_counts("1..5").unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(parse_face_counts("1,2,4").unwrap(), vec![1, 2, 4]);
        assert!(parse_face_counts("5..1").is_err());
        assert!(parse_face_counts("x").is_err());
        assert!(parse_face_counts("").is_err());
    }

    #[test]
    fn zero_frames_is_a_usage_error() {
        let e = Cli::try_parse_from(["facepipe", "bench", "--frames", "0"]).unwrap_err();
        assert!(e.use_stderr());
    }

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(CliError::Other(String::new()).exit_code(), 1);
        assert_eq!(CliError::Model(String::new()).exit_code(), 2);
        assert_eq!(CliError::Input(String::new()).exit_code(), 3);
        assert_eq!(CliError::NoFace(String::new()).exit_code(), 4);
        assert_eq!(CliError::Usage(String::new()).exit_code(), 5);
    }
}
