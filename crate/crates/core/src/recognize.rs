//! Embeddings, the identity gallery, and verification / identification
//! decisions on cosine similarity.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infer::{forward_f32, forward_i8, InferError, Model, Precision};
use crate::tensor::{normalize_to_tensor, Image};

pub const DEFAULT_VERIFY_THRESHOLD: f64 = 0.5;
pub const GALLERY_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecognizeError {
    #[error("embedding dimension {found} does not match expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),
    #[error("aligned face is {width}x{height}, embedder expects {want_w}x{want_h}")]
    AlignedSize {
        width: usize,
        height: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("identity {0:?} not found in gallery")]
    NotFound(String),
    #[error("no verification pairs")]
    EmptyPairs,
    #[error("unsupported gallery version {0}")]
    UnsupportedVersion(u32),
    #[error("gallery io: {0}")]
    Io(#[from] std::io::Error),
    #[error("gallery json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Infer(#[from] InferError),
}

/// Unit-length face descriptor.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Scales `v` to unit length.
    pub fn normalized(v: Vec<f32>) -> Result<Self, RecognizeError> {
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(RecognizeError::InvalidEmbedding(
                "empty or non-finite vector".into(),
            ));
        }
        let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(RecognizeError::InvalidEmbedding("zero vector".into()));
        }
        Ok(Self(
            v.into_iter().map(|x| (x as f64 / norm) as f32).collect(),
        ))
    }

    /// Accepts an already-normalized vector as is, bit for bit.
    pub fn from_unit(v: Vec<f32>) -> Result<Self, RecognizeError> {
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(RecognizeError::InvalidEmbedding(
                "empty or non-finite vector".into(),
            ));
        }
        let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(RecognizeError::InvalidEmbedding(format!(
                "norm {norm} is not 1"
            )));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl<'de> Deserialize<'de> for Embedding {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<f32>::deserialize(d)?;
        Embedding::from_unit(v).map_err(serde::de::Error::custom)
    }
}

/// Runs the embedder on an aligned crop and returns the unit-norm descriptor.
pub fn embed_face(
    model: &Model,
    aligned: &Image,
    precision: Precision,
) -> Result<Embedding, RecognizeError> {
    if let [1, 3, h, w] = *model.input_shape() {
        if aligned.width() != w || aligned.height() != h {
            return Err(RecognizeError::AlignedSize {
                width: aligned.width(),
                height: aligned.height(),
                want_w: w,
                want_h: h,
            });
        }
    }
    let input = normalize_to_tensor(aligned);
    let out = match precision {
        Precision::F32 => forward_f32(model, &input)?,
        Precision::I8 => forward_i8(model, &input)?,
    };
    let v = out.into_f32().map_err(InferError::from)?;
    if v.len() != model.embedding_dim() {
        return Err(RecognizeError::DimensionMismatch {
            expected: model.embedding_dim(),
            found: v.len(),
        });
    }
    Embedding::normalized(v)
}

/// Dot product of unit vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &Embedding, b: &Embedding) -> f64 {
    a.0.iter()
        .zip(&b.0)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum::<f64>()
        .clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub id: Option<String>,
    pub similarity: f64,
    pub accepted: bool,
}

pub fn verify(a: &Embedding, b: &Embedding, threshold: f64) -> MatchResult {
    let similarity = cosine(a, b);
    MatchResult {
        id: None,
        similarity,
        accepted: similarity >= threshold,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub id: String,
    pub display_name: String,
    pub enrolled_at: DateTime<Utc>,
    pub embeddings: Vec<Embedding>,
}

impl GalleryEntry {
    /// Max-similarity fusion over the entry's embeddings.
    pub fn similarity(&self, probe: &Embedding) -> f64 {
        self.embeddings
            .iter()
            .map(|e| cosine(e, probe))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GalleryFile {
    version: u32,
    dim: usize,
    entries: Vec<GalleryEntry>,
}

/// Enrolled identities keyed (and therefore iterated) by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    dim: usize,
    entries: BTreeMap<String, GalleryEntry>,
}

impl Gallery {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&GalleryEntry> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &GalleryEntry> {
        self.entries.values()
    }

    /// Appends to an existing identity or creates a new one.
    pub fn enroll(
        &mut self,
        id: &str,
        name: &str,
        embedding: Embedding,
    ) -> Result<(), RecognizeError> {
        self.enroll_at(id, name, embedding, Utc::now())
    }

    pub fn enroll_at(
        &mut self,
        id: &str,
        name: &str,
        embedding: Embedding,
        at: DateTime<Utc>,
    ) -> Result<(), RecognizeError> {
        if embedding.dim() != self.dim {
            return Err(RecognizeError::DimensionMismatch {
                expected: self.dim,
                found: embedding.dim(),
            });
        }
        self.entries
            .entry(id.to_string())
            .or_insert_with(|| GalleryEntry {
                id: id.to_string(),
                display_name: name.to_string(),
                enrolled_at: at,
                embeddings: Vec::new(),
            })
            .embeddings
            .push(embedding);
        Ok(())
    }

    pub fn remove(&mut self, id: &str) -> Result<GalleryEntry, RecognizeError> {
        self.entries
            .remove(id)
            .ok_or_else(|| RecognizeError::NotFound(id.to_string()))
    }

    /// Best-matching identity. Ties resolve to the lexicographically
    /// smallest id; an empty gallery yields a rejected result with
    /// similarity -1.
    pub fn identify(
        &self,
        probe: &Embedding,
        threshold: f64,
    ) -> Result<MatchResult, RecognizeError> {
        let mut best: Option<(&str, f64)> = None;
        for entry in self.entries.values() {
            if probe.dim() != self.dim {
                return Err(RecognizeError::DimensionMismatch {
                    expected: self.dim,
                    found: probe.dim(),
                });
            }
            let sim = entry.similarity(probe);
            if best.is_none_or(|(_, s)| sim > s) {
                best = Some((&entry.id, sim));
            }
        }
        Ok(match best {
            Some((id, similarity)) => MatchResult {
                id: Some(id.to_string()),
                similarity,
                accepted: similarity >= threshold,
            },
            None => MatchResult {
                id: None,
                similarity: -1.0,
                accepted: false,
            },
        })
    }

    pub fn to_json(&self) -> Result<String, RecognizeError> {
        let file = GalleryFile {
            version: GALLERY_VERSION,
            dim: self.dim,
            entries: self.entries.values().cloned().collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self, RecognizeError> {
        let file: GalleryFile = serde_json::from_str(text)?;
        if file.version != GALLERY_VERSION {
            return Err(RecognizeError::UnsupportedVersion(file.version));
        }
        let mut entries = BTreeMap::new();
        for e in file.entries {
            if e.embeddings.is_empty() {
                return Err(RecognizeError::InvalidEmbedding(format!(
                    "entry {:?} has no embeddings",
                    e.id
                )));
            }
            if let Some(bad) = e.embeddings.iter().find(|v| v.dim() != file.dim) {
                return Err(RecognizeError::DimensionMismatch {
                    expected: file.dim,
                    found: bad.dim(),
                });
            }
            if entries.insert(e.id.clone(), e).is_some() {
                return Err(RecognizeError::InvalidEmbedding(
                    "duplicate gallery id".into(),
                ));
            }
        }
        Ok(Self {
            dim: file.dim,
            entries,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RecognizeError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Writes through a sibling temp file and a rename so a concurrent reader
    /// sees either the old or the new gallery, never a torn one.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RecognizeError> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Gallery shared between threads: any number of concurrent identifications,
/// exclusive enroll/remove.
#[derive(Debug, Clone)]
pub struct SharedGallery(Arc<RwLock<Gallery>>);

impl SharedGallery {
    pub fn new(gallery: Gallery) -> Self {
        Self(Arc::new(RwLock::new(gallery)))
    }

    pub fn identify(
        &self,
        probe: &Embedding,
        threshold: f64,
    ) -> Result<MatchResult, RecognizeError> {
        self.0
            .read()
            .expect("gallery lock poisoned")
            .identify(probe, threshold)
    }

    pub fn enroll(&self, id: &str, name: &str, embedding: Embedding) -> Result<(), RecognizeError> {
        self.0
            .write()
            .expect("gallery lock poisoned")
            .enroll(id, name, embedding)
    }

    pub fn remove(&self, id: &str) -> Result<GalleryEntry, RecognizeError> {
        self.0.write().expect("gallery lock poisoned").remove(id)
    }

    pub fn snapshot(&self) -> Gallery {
        self.0.read().expect("gallery lock poisoned").clone()
    }
}

/// A labelled verification pair: two embeddings and whether they belong to
/// the same person.
pub type LabelledPair = (Embedding, Embedding, bool);

/// Fraction of pairs on which `verify` at `threshold` agrees with the label.
pub fn pairwise_accuracy(pairs: &[LabelledPair], threshold: f64) -> Result<f64, RecognizeError> {
    if pairs.is_empty() {
        return Err(RecognizeError::EmptyPairs);
    }
    let correct = pairs
        .iter()
        .filter(|(a, b, same)| verify(a, b, threshold).accepted == *same)
        .count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// Accuracy at every distinct pair similarity (plus one threshold above all
/// of them), sorted by threshold.
pub fn threshold_sweep(pairs: &[LabelledPair]) -> Result<Vec<(f64, f64)>, RecognizeError> {
    if pairs.is_empty() {
        return Err(RecognizeError::EmptyPairs);
    }
    let mut sims: Vec<(f64, bool)> = pairs.iter().map(|(a, b, s)| (cosine(a, b), *s)).collect();
    sims.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = sims.len() as f64;
    let total_same = sims.iter().filter(|s| s.1).count();
    // threshold at sims[i] accepts indices >= i
    let mut out = Vec::new();
    let mut same_below = 0usize;
    let mut diff_below = 0usize;
    let mut i = 0;
    while i < sims.len() {
        let t = sims[i].0;
        let correct = (total_same - same_below) + diff_below;
        out.push((t, correct as f64 / n));
        while i < sims.len() && sims[i].0 == t {
            if sims[i].1 {
                same_below += 1;
            } else {
                diff_below += 1;
            }
            i += 1;
        }
    }
    let above = f64::from_bits(sims.last().unwrap().0.to_bits() + 1).min(f64::INFINITY);
    out.push((above, diff_below as f64 / n));
    Ok(out)
}

/// Operating point with the highest accuracy (lowest threshold among ties).
pub fn best_threshold(pairs: &[LabelledPair]) -> Result<(f64, f64), RecognizeError> {
    let sweep = threshold_sweep(pairs)?;
    Ok(sweep.into_iter().fold(
        (f64::NAN, -1.0),
        |best, (t, acc)| if acc > best.1 { (t, acc) } else { best },
    ))
}
