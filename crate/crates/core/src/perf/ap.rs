//! Average precision of ranked detections against ground-truth boxes.

use std::collections::HashMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PerfError;
use crate::detect::{iou, BBox, DetectionFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

/// Which GT boxes count as positives. Untagged boxes only count under `All`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DifficultyFilter {
    Easy,
    Hard,
    All,
}

impl DifficultyFilter {
    fn admits(self, tag: Option<Difficulty>) -> bool {
        matches!(
            (self, tag),
            (DifficultyFilter::All, _)
                | (DifficultyFilter::Easy, Some(Difficulty::Easy))
                | (DifficultyFilter::Hard, Some(Difficulty::Hard))
        )
    }
}

impl FromStr for DifficultyFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "easy" => Ok(DifficultyFilter::Easy),
            "hard" => Ok(DifficultyFilter::Hard),
            "all" => Ok(DifficultyFilter::All),
            other => Err(format!("unknown difficulty {other:?} (easy, hard or all)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthImage {
    pub image: String,
    pub boxes: Vec<BBox>,
    /// Empty, or one tag per box.
    #[serde(default)]
    pub difficulty: Vec<Difficulty>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSet {
    pub images: Vec<GroundTruthImage>,
}

/// A ground-truth box; ignored boxes are neither positives nor false-positive
/// sources (detections landing on them are dropped from the ranking).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: BBox,
    pub ignore: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    /// Index into the per-image GT list.
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

fn check_box(b: &BBox) -> Result<(), PerfError> {
    if b.iter().all(|v| v.is_finite()) && b[0] < b[2] && b[1] < b[3] {
        Ok(())
    } else {
        Err(PerfError::InvalidBox(*b))
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Exact running sum of fractions, abandoned on overflow.
#[derive(Clone, Copy)]
struct Frac {
    num: u128,
    den: u128,
}

impl Frac {
    fn checked_add(self, num: u128, den: u128) -> Option<Frac> {
        let g = gcd(self.den, den);
        let d = (self.den / g).checked_mul(den)?;
        let n = self
            .num
            .checked_mul(den / g)?
            .checked_add(num.checked_mul(self.den / g)?)?;
        let r = gcd(n, d).max(1);
        Some(Frac {
            num: n / r,
            den: d / r,
        })
    }
}

/// All-point interpolated AP.
///
/// Detections are ranked by score (descending, ties in input order) and each
/// is greedily matched to the unmatched positive GT box of highest IoU
/// `>= iou_thresh` in its image. A precision/recall point is taken after each
/// group of equal scores, and AP is the area under the monotone precision
/// envelope. The result is the correctly rounded value of the exact rational
/// AP whenever that fraction fits in 53-bit numerator and denominator.
pub fn average_precision(
    dets: &[ScoredBox],
    gt: &[Vec<GtBox>],
    iou_thresh: f64,
) -> Result<f64, PerfError> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(PerfError::IouThreshold(iou_thresh));
    }
    for g in gt.iter().flatten() {
        check_box(&g.bbox)?;
    }
    for d in dets {
        check_box(&d.bbox)?;
        if !d.score.is_finite() {
            return Err(PerfError::BadScore);
        }
    }
    let npos = gt.iter().flatten().filter(|g| !g.ignore).count() as u128;
    if npos == 0 {
        return Err(PerfError::EmptyGroundTruth);
    }

    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));

    let mut matched: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0u128, 0u128);
    let mut points: Vec<(u128, u128)> = Vec::new();
    for (pos, &di) in order.iter().enumerate() {
        let d = &dets[di];
        let boxes = gt.get(d.image).map(Vec::as_slice).unwrap_or(&[]);
        let mut best: Option<(usize, f64)> = None;
        let mut on_ignored = false;
        for (gi, g) in boxes.iter().enumerate() {
            let o = iou(&d.bbox, &g.bbox);
            if o < iou_thresh {
                continue;
            }
            if g.ignore {
                on_ignored = true;
            } else if !matched[d.image][gi] && best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[d.image][gi] = true;
                tp += 1;
            }
            None if on_ignored => {}
            None => fp += 1,
        }
        let group_ends = order.get(pos + 1).is_none_or(|&n| dets[n].score != d.score);
        if group_ends && tp + fp > 0 {
            points.push((tp, fp));
        }
    }

    // precision envelope from the right, kept as fractions tp / (tp + fp)
    let mut env = vec![(0u128, 1u128); points.len()];
    let mut best = (0u128, 1u128);
    for (i, &(t, f)) in points.iter().enumerate().rev() {
        let p = (t, t + f);
        if p.0 * best.1 > best.0 * p.1 {
            best = p;
        }
        env[i] = best;
    }

    let mut exact = Some(Frac { num: 0, den: 1 });
    let mut approx = 0.0f64;
    let mut prev_tp = 0u128;
    for (&(t, _), &(en, ed)) in points.iter().zip(&env) {
        let dt = t - prev_tp;
        prev_tp = t;
        if dt == 0 {
            continue;
        }
        approx += dt as f64 * en as f64 / ed as f64;
        exact = exact.and_then(|acc| acc.checked_add(dt * en, ed));
    }
    const EXACT_LIMIT: u128 = 1 << 53;
    if let Some((num, den)) = exact.and_then(|f| f.den.checked_mul(npos).map(|d| (f.num, d))) {
        let g = gcd(num, den).max(1);
        let (num, den) = (num / g, den / g);
        if num <= EXACT_LIMIT && den <= EXACT_LIMIT {
            return Ok(num as f64 / den as f64);
        }
    }
    Ok(approx / npos as f64)
}

/// AP of detection files against a GT set under a difficulty filter.
/// Detections on images absent from the GT are false positives.
pub fn evaluate_sets(
    dets: &[DetectionFile],
    gt: &GroundTruthSet,
    filter: DifficultyFilter,
    iou_thresh: f64,
) -> Result<f64, PerfError> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut boxes: Vec<Vec<GtBox>> = Vec::new();
    for img in &gt.images {
        if !img.difficulty.is_empty() && img.difficulty.len() != img.boxes.len() {
            return Err(PerfError::GroundTruth(format!(
                "{}: {} boxes but {} difficulty tags",
                img.image,
                img.boxes.len(),
                img.difficulty.len()
            )));
        }
        let gi = *index.entry(img.image.as_str()).or_insert_with(|| {
            boxes.push(Vec::new());
            boxes.len() - 1
        });
        for (k, b) in img.boxes.iter().enumerate() {
            boxes[gi].push(GtBox {
                bbox: *b,
                ignore: !filter.admits(img.difficulty.get(k).copied()),
            });
        }
    }
    let mut scored = Vec::new();
    for file in dets {
        let gi = *index.entry(file.image.as_str()).or_insert_with(|| {
            boxes.push(Vec::new());
            boxes.len() - 1
        });
        scored.extend(file.detections.iter().map(|d| ScoredBox {
            image: gi,
            bbox: d.bbox,
            score: d.score,
        }));
    }
    average_precision(&scored, &boxes, iou_thresh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::Detection;

    fn gt(b: BBox) -> GtBox {
        GtBox {
            bbox: b,
            ignore: false,
        }
    }

    fn det(image: usize, bbox: BBox, score: f64) -> ScoredBox {
        ScoredBox { image, bbox, score }
    }

    const A: BBox = [0.0, 0.0, 10.0, 10.0];
    const B: BBox = [20.0, 20.0, 30.0, 30.0];
    const FAR: BBox = [100.0, 100.0, 110.0, 110.0];

    #[test]
    fn hand_worked_five_sixths() {
        let g = vec![vec![gt(A), gt(B)]];
        let d = [det(0, A, 0.9), det(0, FAR, 0.8), det(0, B, 0.7)];
        assert_eq!(average_precision(&d, &g, 0.5).unwrap(), 5.0 / 6.0);
    }

    #[test]
    fn perfect_and_zero() {
        let g = vec![vec![gt(A), gt(B)]];
        assert_eq!(
            average_precision(&[det(0, A, 0.1), det(0, B, 0.3)], &g, 0.5).unwrap(),
            1.0
        );
        assert_eq!(
            average_precision(&[det(0, FAR, 0.9)], &g, 0.5).unwrap(),
            0.0
        );
        assert_eq!(average_precision(&[], &g, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn duplicates_are_false_positives() {
        let g = vec![vec![gt(A)]];
        let d = [det(0, A, 0.9), det(0, A, 0.8)];
        assert_eq!(average_precision(&d, &g, 0.5).unwrap(), 1.0);
        let d = [det(0, A, 0.8), det(0, FAR, 0.9)];
        assert_eq!(average_precision(&d, &g, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn ties_form_one_point() {
        // FP and TP share a score: the single point is (r=1, p=1/2)
        let g = vec![vec![gt(A)]];
        let d = [det(0, FAR, 0.5), det(0, A, 0.5)];
        assert_eq!(average_precision(&d, &g, 0.5).unwrap(), 0.5);
        let d = [det(0, A, 0.5), det(0, FAR, 0.5)];
        assert_eq!(average_precision(&d, &g, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            average_precision(&[], &[vec![]], 0.5),
            Err(PerfError::EmptyGroundTruth)
        ));
        let g = vec![vec![gt(A)]];
        assert!(matches!(
            average_precision(&[], &g, 1.0),
            Err(PerfError::IouThreshold(_))
        ));
        assert!(matches!(
            average_precision(&[det(0, [5.0, 0.0, 1.0, 1.0], 0.1)], &g, 0.5),
            Err(PerfError::InvalidBox(_))
        ));
    }

    #[test]
    fn ignored_gt_absorbs_detections() {
        let g = vec![vec![
            gt(A),
            GtBox {
                bbox: B,
                ignore: true,
            },
        ]];
        let d = [det(0, B, 0.9), det(0, A, 0.8)];
        assert_eq!(average_precision(&d, &g, 0.5).unwrap(), 1.0);
    }

    fn file(image: &str, boxes: &[(BBox, f64)]) -> DetectionFile {
        DetectionFile {
            image: image.into(),
            width: 200,
            height: 200,
            detections: boxes
                .iter()
                .map(|&(bbox, score)| Detection {
                    bbox,
                    score,
                    landmarks: [[0.0; 2]; 5],
                })
                .collect(),
        }
    }

    #[test]
    fn sets_with_difficulty() {
        let gt = GroundTruthSet {
            images: vec![GroundTruthImage {
                image: "a.ppm".into(),
                boxes: vec![A, B],
                difficulty: vec![Difficulty::Easy, Difficulty::Hard],
            }],
        };
        let dets = [file("a.ppm", &[(A, 0.9)]), file("other.ppm", &[(A, 0.95)])];
        assert_eq!(
            evaluate_sets(&dets, &gt, DifficultyFilter::Easy, 0.5).unwrap(),
            0.5
        );
        assert_eq!(
            evaluate_sets(&dets, &gt, DifficultyFilter::Hard, 0.5).unwrap(),
            0.0
        );
        assert_eq!(
            evaluate_sets(&dets, &gt, DifficultyFilter::All, 0.5).unwrap(),
            0.25
        );

        let untagged = GroundTruthSet {
            images: vec![GroundTruthImage {
                image: "a.ppm".into(),
                boxes: vec![A],
                difficulty: vec![],
            }],
        };
        assert!(matches!(
            evaluate_sets(&dets, &untagged, DifficultyFilter::Hard, 0.5),
            Err(PerfError::EmptyGroundTruth)
        ));
    }
}
