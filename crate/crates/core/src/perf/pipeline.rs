//! End-to-end frame processing: detect -> align -> embed -> identify.

use std::sync::mpsc::sync_channel;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{align_face, crop_resize, AlignError, ALIGNED_SIZE, DEFAULT_TEMPLATE};
use crate::detect::{detect_faces_timed, DetectError, DetectTimings, Detection, DetectorParams};
use crate::infer::{Model, Precision};
use crate::recognize::{
    embed_face, Embedding, Gallery, MatchResult, RecognizeError, DEFAULT_VERIFY_THRESHOLD,
};
use crate::tensor::Image;

/// Depth of the hand-off queue between the detection and embedding workers.
pub const QUEUE_DEPTH: usize = 2;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Recognize(#[from] RecognizeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub detector: DetectorParams,
    pub precision: Precision,
    /// Similarity-align to `template`; otherwise the box is stretched to
    /// 112x112.
    pub align: bool,
    pub template: [[f64; 2]; 5],
    pub threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            detector: DetectorParams::default(),
            precision: Precision::F32,
            align: true,
            template: DEFAULT_TEMPLATE,
            threshold: DEFAULT_VERIFY_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceResult {
    pub face: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(flatten)]
    pub matched: MatchResult,
}

pub struct Pipeline<'a> {
    pub detector: &'a Model,
    pub embedder: &'a Model,
    pub config: PipelineConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(detector: &'a Model, embedder: &'a Model, config: PipelineConfig) -> Self {
        Self {
            detector,
            embedder,
            config,
        }
    }

    pub fn detect(&self, img: &Image) -> Result<(Vec<Detection>, DetectTimings), PipelineError> {
        Ok(detect_faces_timed(
            self.detector,
            img,
            &self.config.detector,
        )?)
    }

    /// The 112x112 crop fed to the embedder.
    pub fn crop(&self, img: &Image, det: &Detection) -> Result<Image, PipelineError> {
        Ok(if self.config.align {
            align_face(img, det, &self.config.template)?.image
        } else {
            crop_resize(img, &det.bbox, ALIGNED_SIZE, ALIGNED_SIZE)?
        })
    }

    pub fn embed(&self, crop: &Image) -> Result<Embedding, PipelineError> {
        Ok(embed_face(self.embedder, crop, self.config.precision)?)
    }

    fn detect_and_crop(&self, img: &Image) -> Result<Vec<(Detection, Image)>, PipelineError> {
        let (dets, _) = self.detect(img)?;
        dets.into_iter()
            .map(|d| {
                let c = self.crop(img, &d)?;
                Ok((d, c))
            })
            .collect()
    }

    fn identify_all(
        &self,
        faces: Vec<(Detection, Image)>,
        gallery: &Gallery,
    ) -> Result<Vec<FaceResult>, PipelineError> {
        faces
            .into_iter()
            .enumerate()
            .map(|(face, (d, crop))| {
                let e = self.embed(&crop)?;
                Ok(FaceResult {
                    face,
                    bbox: d.bbox,
                    score: d.score,
                    matched: gallery.identify(&e, self.config.threshold)?,
                })
            })
            .collect()
    }

    pub fn process_frame(
        &self,
        img: &Image,
        gallery: &Gallery,
    ) -> Result<Vec<FaceResult>, PipelineError> {
        let faces = self.detect_and_crop(img)?;
        self.identify_all(faces, gallery)
    }

    /// Processes `frames` with detection of frame t+1 overlapping embedding of
    /// frame t. Returns per-frame results with end-to-end latency measured
    /// from the start of that frame's detection to the end of its
    /// identification.
    pub fn run_overlapped(
        &self,
        frames: &[Image],
        gallery: &Gallery,
    ) -> Result<Vec<(Vec<FaceResult>, Duration)>, PipelineError> {
        let (tx, rx) =
            sync_channel::<(Instant, Result<Vec<(Detection, Image)>, PipelineError>)>(QUEUE_DEPTH);
        std::thread::scope(|s| {
            s.spawn(move || {
                for f in frames {
                    let t0 = Instant::now();
                    let staged = self.detect_and_crop(f);
                    let failed = staged.is_err();
                    if tx.send((t0, staged)).is_err() || failed {
                        break;
                    }
                }
            });
            let mut out = Vec::with_capacity(frames.len());
            for (t0, staged) in rx {
                let results = self.identify_all(staged?, gallery)?;
                out.push((results, t0.elapsed()));
            }
            Ok(out)
        })
    }
}

/// Worker threads for the pipeline stage, from `FACEPIPE_THREADS`
/// (default 1; values of 2 or more enable overlap).
pub fn pipeline_threads() -> usize {
    std::env::var("FACEPIPE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}
