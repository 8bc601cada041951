//! Detection-to-ground-truth matching and per-condition metrics.
//!
//! Matching is greedy and one-to-one, in two passes. Detections are visited
//! by descending confidence (ties: smaller x, then y, w, h, class id).
//!
//! First pass: each detection claims the free same-class ground truth with
//! the highest IoU at or above the threshold. These are the correct
//! detections.
//!
//! Second pass, over the detections left unclaimed, in the same order:
//!
//! 1. a free ground truth of another class at or above the threshold makes it
//!    a misclassification, and that object is marked confused (it counts as
//!    neither correct nor missed);
//! 2. otherwise an already-claimed same-class ground truth at or above the
//!    threshold makes it a duplicate;
//! 3. otherwise an already-claimed ground truth of another class at or above
//!    the threshold makes it a misclassification that confuses nothing new;
//! 4. otherwise it is a false positive.
//!
//! Accuracy is `correct / total ground truth`. False positives are reported
//! next to it, never subtracted from it.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{EvaluationUniverse, Provenance};
use crate::stratify::StratifiedTestSet;
use crate::types::{iou, Detection, GroundTruthInstance, ImageId};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("detections and ground truth span more than one image ({0} and {1})")]
    ImageMismatch(ImageId, ImageId),
    #[error("IoU threshold must be in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("confidence floor must be in [0, 1], got {0}")]
    InvalidFloor(f64),
    #[error("test set {0:?} has no ground-truth instances")]
    EmptyTestSet(String),
    #[error("condition {0:?} has an image with more correct detections than objects")]
    InvalidCounts(String),
    #[error("test set {condition:?} references unknown image {image_id}")]
    UnknownImage { condition: String, image_id: ImageId },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub detection: usize,
    pub gt: usize,
    pub iou: f64,
}

/// Outcome of matching one image. Indices refer to the input slices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub matched: Vec<Pair>,
    pub duplicates: Vec<usize>,
    pub misclassified: Vec<Pair>,
    /// Ground truths claimed by a misclassification and by nothing else.
    pub confused_gt: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

#[derive(Clone, Copy, PartialEq)]
enum GtState {
    Free,
    Matched,
    Confused,
}

fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence()
        .total_cmp(&a.confidence())
        .then_with(|| a.bbox.geometric_cmp(&b.bbox))
        .then(a.class_id.cmp(&b.class_id))
}

fn gt_order(a: &GroundTruthInstance, b: &GroundTruthInstance) -> Ordering {
    a.bbox
        .geometric_cmp(&b.bbox)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.id.cmp(&b.id))
}

pub fn match_image(
    detections: &[Detection],
    ground_truth: &[GroundTruthInstance],
    iou_threshold: f64,
) -> Result<MatchResult, EvalError> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(EvalError::InvalidThreshold(iou_threshold));
    }
    let mut ids = detections
        .iter()
        .map(|d| &d.image_id)
        .chain(ground_truth.iter().map(|g| &g.image_id));
    if let Some(first) = ids.next() {
        if let Some(other) = ids.find(|id| *id != first) {
            return Err(EvalError::ImageMismatch(first.clone(), other.clone()));
        }
    }

    let mut det_order: Vec<usize> = (0..detections.len()).collect();
    det_order.sort_by(|&a, &b| detection_order(&detections[a], &detections[b]));
    // candidate ground truths are scanned in geometric order so equal-IoU
    // ties do not depend on input order
    let mut gt_scan: Vec<usize> = (0..ground_truth.len()).collect();
    gt_scan.sort_by(|&a, &b| gt_order(&ground_truth[a], &ground_truth[b]));

    let mut state = vec![GtState::Free; ground_truth.len()];
    let mut result = MatchResult::default();

    // best ground truth at or above the threshold among those accepted by `want`
    let best = |det: &Detection, state: &[GtState], same_class: bool, want: fn(GtState) -> bool| {
        let mut best: Option<(usize, f64)> = None;
        for &g in &gt_scan {
            let gt = &ground_truth[g];
            if (gt.class_id == det.class_id) != same_class || !want(state[g]) {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v >= iou_threshold && best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        best
    };
    let free = |s: GtState| s == GtState::Free;
    let taken = |s: GtState| s != GtState::Free;

    let mut leftover = Vec::new();
    for &d in &det_order {
        match best(&detections[d], &state, true, free) {
            Some((g, v)) => {
                state[g] = GtState::Matched;
                result.matched.push(Pair { detection: d, gt: g, iou: v });
            }
            None => leftover.push(d),
        }
    }
    for d in leftover {
        let det = &detections[d];
        if let Some((g, v)) = best(det, &state, false, free) {
            state[g] = GtState::Confused;
            result.confused_gt.push(g);
            result.misclassified.push(Pair { detection: d, gt: g, iou: v });
        } else if best(det, &state, true, taken).is_some() {
            result.duplicates.push(d);
        } else if let Some((g, v)) = best(det, &state, false, taken) {
            result.misclassified.push(Pair { detection: d, gt: g, iou: v });
        } else {
            result.unmatched_detections.push(d);
        }
    }

    result.matched.sort_by_key(|p| p.detection);
    result.misclassified.sort_by_key(|p| p.detection);
    result.duplicates.sort_unstable();
    result.confused_gt.sort_unstable();
    result.unmatched_detections.sort_unstable();
    result.unmatched_gt = (0..ground_truth.len())
        .filter(|&g| state[g] == GtState::Free)
        .collect();
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalParams {
    pub iou_threshold: f64,
    /// Detections below this confidence are dropped before matching.
    pub confidence_floor: Option<f64>,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            confidence_floor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageCounts {
    pub image_id: ImageId,
    pub correct: u64,
    pub total_gt: u64,
}

/// Inputs a metrics file was computed from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSources {
    pub manifest_sha256: Option<String>,
    pub annotations: Vec<Provenance>,
    pub predictions: Option<Provenance>,
    pub tags: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub condition: String,
    #[serde(default)]
    pub baseline: bool,
    pub correct: u64,
    pub total_gt: u64,
    pub accuracy: f64,
    pub mean_confidence_correct: f64,
    pub mean_iou_correct: f64,
    pub detections: u64,
    pub duplicates: u64,
    pub misclassified: u64,
    /// Objects whose only overlapping detection had the wrong class.
    pub confused: u64,
    pub false_positives: u64,
    pub missed: u64,
    pub iou_threshold: f64,
    pub confidence_floor: Option<f64>,
    pub per_image: Vec<ImageCounts>,
    #[serde(default)]
    pub sources: MetricsSources,
}

impl ConditionMetrics {
    /// Metrics carrying only per-image correct/total counts; every other
    /// error counter is zero and unmatched objects count as missed.
    pub fn from_image_counts(condition: &str, per_image: Vec<ImageCounts>) -> Result<Self, EvalError> {
        let correct: u64 = per_image.iter().map(|i| i.correct).sum();
        let total_gt: u64 = per_image.iter().map(|i| i.total_gt).sum();
        if total_gt == 0 {
            return Err(EvalError::EmptyTestSet(condition.to_string()));
        }
        if per_image.iter().any(|i| i.correct > i.total_gt) {
            return Err(EvalError::InvalidCounts(condition.to_string()));
        }
        Ok(Self {
            condition: condition.to_string(),
            baseline: false,
            correct,
            total_gt,
            accuracy: correct as f64 / total_gt as f64,
            mean_confidence_correct: 0.0,
            mean_iou_correct: 0.0,
            detections: correct,
            duplicates: 0,
            misclassified: 0,
            confused: 0,
            false_positives: 0,
            missed: total_gt - correct,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            confidence_floor: None,
            per_image,
            sources: MetricsSources::default(),
        })
    }

    /// Checks the counter identities every metrics value must satisfy.
    pub fn check_consistency(&self) -> Result<(), String> {
        if self.correct > self.total_gt {
            return Err(format!("correct {} > total {}", self.correct, self.total_gt));
        }
        if self.correct + self.missed + self.confused != self.total_gt {
            return Err(format!(
                "correct {} + missed {} + confused {} != total {}",
                self.correct, self.missed, self.confused, self.total_gt
            ));
        }
        if self.confused > self.misclassified {
            return Err(format!(
                "confused {} > misclassified {}",
                self.confused, self.misclassified
            ));
        }
        let (c, t) = self
            .per_image
            .iter()
            .fold((0, 0), |(c, t), i| (c + i.correct, t + i.total_gt));
        if (c, t) != (self.correct, self.total_gt) {
            return Err(format!("per-image counts sum to {c}/{t}"));
        }
        if self.total_gt == 0 || self.accuracy != self.correct as f64 / self.total_gt as f64 {
            return Err(format!("accuracy {} is not correct/total", self.accuracy));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMatch {
    pub condition: String,
    pub image_id: ImageId,
    #[serde(flatten)]
    pub result: MatchResult,
}

#[derive(Debug, Clone)]
pub struct ConditionEvaluation {
    pub metrics: ConditionMetrics,
    pub matches: Vec<ImageMatch>,
}

pub fn score_condition(
    test_set: &StratifiedTestSet,
    universe: &EvaluationUniverse,
    params: EvalParams,
) -> Result<ConditionEvaluation, EvalError> {
    if !(params.iou_threshold > 0.0 && params.iou_threshold <= 1.0) {
        return Err(EvalError::InvalidThreshold(params.iou_threshold));
    }
    if let Some(f) = params.confidence_floor {
        if !(0.0..=1.0).contains(&f) {
            return Err(EvalError::InvalidFloor(f));
        }
    }
    let name = &test_set.condition.name;
    for id in &test_set.image_ids {
        if universe.image(id).is_none() {
            return Err(EvalError::UnknownImage {
                condition: name.clone(),
                image_id: id.clone(),
            });
        }
    }

    struct PerImage {
        matched: ImageMatch,
        total_gt: u64,
        detections: u64,
        confidences: Vec<f64>,
    }
    let per_image: Vec<PerImage> = test_set
        .image_ids
        .par_iter()
        .map(|id| {
            let gts: Vec<GroundTruthInstance> =
                universe.ground_truth_for(id).into_iter().cloned().collect();
            let dets: Vec<Detection> = universe
                .detections_for(id)
                .iter()
                .filter(|d| params.confidence_floor.map_or(true, |f| d.confidence() >= f))
                .cloned()
                .collect();
            let result = match_image(&dets, &gts, params.iou_threshold)?;
            let confidences = result
                .matched
                .iter()
                .map(|p| dets[p.detection].confidence())
                .collect();
            Ok(PerImage {
                matched: ImageMatch {
                    condition: name.clone(),
                    image_id: id.clone(),
                    result,
                },
                total_gt: gts.len() as u64,
                detections: dets.len() as u64,
                confidences,
            })
        })
        .collect::<Result<_, EvalError>>()?;

    let mut correct = 0u64;
    let mut total_gt = 0u64;
    let mut detections = 0u64;
    let mut duplicates = 0u64;
    let mut misclassified = 0u64;
    let mut confused = 0u64;
    let mut false_positives = 0u64;
    let mut missed = 0u64;
    let mut confidence_sum = 0.0;
    let mut iou_sum = 0.0;
    let mut counts = Vec::with_capacity(per_image.len());
    for p in &per_image {
        let r = &p.matched.result;
        correct += r.matched.len() as u64;
        total_gt += p.total_gt;
        detections += p.detections;
        duplicates += r.duplicates.len() as u64;
        misclassified += r.misclassified.len() as u64;
        confused += r.confused_gt.len() as u64;
        false_positives += r.unmatched_detections.len() as u64;
        missed += r.unmatched_gt.len() as u64;
        confidence_sum += p.confidences.iter().sum::<f64>();
        iou_sum += r.matched.iter().map(|m| m.iou).sum::<f64>();
        counts.push(ImageCounts {
            image_id: p.matched.image_id.clone(),
            correct: r.matched.len() as u64,
            total_gt: p.total_gt,
        });
    }
    if total_gt == 0 {
        return Err(EvalError::EmptyTestSet(name.clone()));
    }
    let mean = |sum: f64| if correct == 0 { 0.0 } else { sum / correct as f64 };
    let metrics = ConditionMetrics {
        condition: name.clone(),
        baseline: false,
        correct,
        total_gt,
        accuracy: correct as f64 / total_gt as f64,
        mean_confidence_correct: mean(confidence_sum),
        mean_iou_correct: mean(iou_sum),
        detections,
        duplicates,
        misclassified,
        confused,
        false_positives,
        missed,
        iou_threshold: params.iou_threshold,
        confidence_floor: params.confidence_floor,
        per_image: counts,
        sources: MetricsSources {
            manifest_sha256: None,
            annotations: universe.dataset.provenance.clone(),
            predictions: universe.prediction_provenance.clone(),
            tags: universe.tag_provenance.clone(),
        },
    };
    debug_assert_eq!(metrics.check_consistency(), Ok(()));
    Ok(ConditionEvaluation {
        metrics,
        matches: per_image.into_iter().map(|p| p.matched).collect(),
    })
}

/// One JSON object per line, one line per image.
pub fn audit_lines(matches: &[ImageMatch]) -> String {
    let mut out = String::new();
    for m in matches {
        out.push_str(&serde_json::to_string(m).expect("match serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRow {
    pub condition: String,
    pub total_gt: u64,
    pub duplicates: u64,
    pub misclassified: u64,
    pub confused: u64,
    pub false_positives: u64,
    pub missed: u64,
    pub duplicate_rate: f64,
    pub misclassified_rate: f64,
    pub confused_rate: f64,
    pub false_positive_rate: f64,
    pub missed_rate: f64,
}

/// Confusion counters per condition, each also divided by the ground-truth total.
pub fn confusion_summary(metrics: &[ConditionMetrics]) -> Vec<ConfusionRow> {
    metrics
        .iter()
        .map(|m| {
            let rate = |n: u64| {
                if m.total_gt == 0 {
                    0.0
                } else {
                    n as f64 / m.total_gt as f64
                }
            };
            ConfusionRow {
                condition: m.condition.clone(),
                total_gt: m.total_gt,
                duplicates: m.duplicates,
                misclassified: m.misclassified,
                confused: m.confused,
                false_positives: m.false_positives,
                missed: m.missed,
                duplicate_rate: rate(m.duplicates),
                misclassified_rate: rate(m.misclassified),
                confused_rate: rate(m.confused),
                false_positive_rate: rate(m.false_positives),
                missed_rate: rate(m.missed),
            }
        })
        .collect()
}
