//! Synthetic datasets with planted context effects, and a mock detector.
//!
//! Each image is split into equal vertical strips, one per object, and each
//! object's box sits inside its own strip, so ground-truth boxes never
//! overlap. Image `i` draws from `substream(seed, DOMAIN_SYNTH, i)`: one
//! Bernoulli per context tag in config order, then the object count, then
//! per object a class and four box coordinates.
//!
//! The mock detector visits ground truth in dataset order with
//! `substream(seed, DOMAIN_DETECT, i)` per image. An object is hit with
//! probability `clamp(p_base + sum of boosts of the image's tags, 0, 1)`.
//! A hit is relabelled to a uniformly chosen other class with probability
//! `p_misclass` (when there is another class) and followed by a jittered
//! copy with the same label with probability `p_duplicate`. Misses produce
//! nothing.

use std::collections::{BTreeMap, BTreeSet};

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Dataset, EvaluationUniverse, PredictionSet, Provenance, SceneTags};
use crate::rng::{substream, Stream, DOMAIN_DETECT, DOMAIN_SYNTH};
use crate::stratify::Condition;
use crate::types::{
    canonical_tag, BoundingBox, ClassId, Detection, GroundTruthInstance, ImageId, ImageRecord,
    DISTRIBUTION_SUM_TOLERANCE,
};

pub const MAX_BBOX_JITTER: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
}

fn bad<T>(msg: impl Into<String>) -> Result<T, SynthError> {
    Err(SynthError::Config(msg.into()))
}

fn probability(name: &str, p: f64) -> Result<(), SynthError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        bad(format!("{name} = {p} is not in [0, 1]"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextTag {
    pub tag: String,
    pub prevalence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_images: usize,
    /// Class names; class `i` gets id `i + 1`.
    pub classes: Vec<String>,
    /// Instance-level class proportions, aligned with `classes`.
    pub class_weights: Vec<f64>,
    /// Inclusive range.
    pub objects_per_image: (u32, u32),
    #[serde(default)]
    pub context_tags: Vec<ContextTag>,
    #[serde(default = "default_image_size")]
    pub image_size: (u32, u32),
    #[serde(default)]
    pub seed: u64,
}

fn default_image_size() -> (u32, u32) {
    (640, 480)
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.classes.is_empty() {
            return bad("at least one class is required");
        }
        let names: BTreeSet<_> = self.classes.iter().map(|c| c.trim()).collect();
        if names.len() != self.classes.len() || names.contains("") {
            return bad("class names must be non-empty and distinct");
        }
        if self.class_weights.len() != self.classes.len() {
            return bad(format!(
                "{} class weights for {} classes",
                self.class_weights.len(),
                self.classes.len()
            ));
        }
        if self.class_weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return bad("class weights must lie in [0, 1]");
        }
        let sum: f64 = self.class_weights.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_SUM_TOLERANCE {
            return bad(format!("class weights sum to {sum}"));
        }
        let (lo, hi) = self.objects_per_image;
        if lo > hi {
            return bad(format!("objects_per_image ({lo}, {hi}) has min > max"));
        }
        let (w, h) = self.image_size;
        // every strip must be at least a few pixels wide
        if w < 4 * hi.max(1) || h < 4 {
            return bad(format!("image size {w}x{h} too small for {hi} objects"));
        }
        let mut seen = BTreeSet::new();
        for t in &self.context_tags {
            let Some(tag) = canonical_tag(&t.tag) else {
                return bad("empty context tag");
            };
            if !seen.insert(tag.clone()) {
                return bad(format!("context tag {tag:?} listed twice"));
            }
            probability(&format!("prevalence of {tag:?}"), t.prevalence)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockDetectorConfig {
    pub p_base: f64,
    #[serde(default)]
    pub context_boosts: BTreeMap<String, f64>,
    #[serde(default)]
    pub p_duplicate: f64,
    #[serde(default)]
    pub p_misclass: f64,
    /// Maximum shift of each box coordinate, as a fraction of the box side.
    /// At most [`MAX_BBOX_JITTER`], which keeps every hit above IoU 0.5.
    #[serde(default)]
    pub bbox_jitter: f64,
    #[serde(default = "default_hit_confidence")]
    pub hit_confidence: (f64, f64),
    #[serde(default = "default_spurious_confidence")]
    pub spurious_confidence: (f64, f64),
    #[serde(default)]
    pub seed: u64,
}

fn default_hit_confidence() -> (f64, f64) {
    (0.5, 1.0)
}

fn default_spurious_confidence() -> (f64, f64) {
    (0.05, 0.5)
}

impl Default for MockDetectorConfig {
    fn default() -> Self {
        Self {
            p_base: 0.5,
            context_boosts: BTreeMap::new(),
            p_duplicate: 0.0,
            p_misclass: 0.0,
            bbox_jitter: 0.0,
            hit_confidence: default_hit_confidence(),
            spurious_confidence: default_spurious_confidence(),
            seed: 0,
        }
    }
}

impl MockDetectorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        probability("p_base", self.p_base)?;
        probability("p_duplicate", self.p_duplicate)?;
        probability("p_misclass", self.p_misclass)?;
        if !(0.0..=MAX_BBOX_JITTER).contains(&self.bbox_jitter) {
            return bad(format!("bbox_jitter {} not in [0, {MAX_BBOX_JITTER}]", self.bbox_jitter));
        }
        for (name, (lo, hi)) in [("hit_confidence", self.hit_confidence), ("spurious_confidence", self.spurious_confidence)] {
            probability(name, lo)?;
            probability(name, hi)?;
            if lo > hi {
                return bad(format!("{name} ({lo}, {hi}) has lo > hi"));
            }
        }
        self.boosts().map(|_| ())
    }

    fn boosts(&self) -> Result<BTreeMap<String, f64>, SynthError> {
        let mut out = BTreeMap::new();
        for (raw, &b) in &self.context_boosts {
            let Some(tag) = canonical_tag(raw) else {
                return bad("empty boost tag");
            };
            if !b.is_finite() || !(-1.0..=1.0).contains(&b) {
                return bad(format!("boost for {tag:?} = {b} is not in [-1, 1]"));
            }
            if out.insert(tag.clone(), b).is_some() {
                return bad(format!("boost for {tag:?} listed twice"));
            }
        }
        Ok(out)
    }
}

/// Probability that an object in an image with `tags` is detected with its
/// own class.
fn correct_probability(
    tags: &BTreeSet<String>,
    p_base: f64,
    boosts: &BTreeMap<String, f64>,
    p_wrong_label: f64,
) -> f64 {
    let boost: f64 = tags.iter().filter_map(|t| boosts.get(t)).sum();
    (p_base + boost).clamp(0.0, 1.0) * (1.0 - p_wrong_label)
}

fn effective_misclass(detector: &MockDetectorConfig, classes: usize) -> f64 {
    if classes > 1 {
        detector.p_misclass
    } else {
        0.0
    }
}

fn pick_weighted(s: &mut Stream, weights: &[f64]) -> usize {
    let u = s.unit();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the last partial sum
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

struct GeneratedImage {
    tags: BTreeSet<String>,
    objects: Vec<(u32, BoundingBox)>,
}

fn generate_image(config: &SynthConfig, tags: &[(String, f64)], index: u64) -> GeneratedImage {
    let mut s = substream(config.seed, DOMAIN_SYNTH, index);
    let present = tags
        .iter()
        .filter(|(_, p)| s.bernoulli(*p))
        .map(|(t, _)| t.clone())
        .collect();
    let (lo, hi) = config.objects_per_image;
    let k = lo + s.below(u64::from(hi - lo) + 1) as u32;
    let (w, h) = (f64::from(config.image_size.0), f64::from(config.image_size.1));
    let strip = w / f64::from(k.max(1));
    let objects = (0..k)
        .map(|j| {
            let class = pick_weighted(&mut s, &config.class_weights) as u32 + 1;
            let bw = strip * s.uniform(0.3, 0.8);
            let bh = h * s.uniform(0.1, 0.5);
            let x = f64::from(j) * strip + s.uniform(0.0, strip - bw);
            let y = s.uniform(0.0, h - bh);
            (class, BoundingBox::new(x, y, bw, bh).expect("box inside its strip"))
        })
        .collect();
    GeneratedImage { tags: present, objects }
}

/// Generates the annotation set and its scene tags. Image ids run from 1.
pub fn synth_generate(config: &SynthConfig) -> Result<(Dataset, SceneTags), SynthError> {
    config.validate()?;
    let tags: Vec<(String, f64)> = config
        .context_tags
        .iter()
        .map(|t| (canonical_tag(&t.tag).expect("validated"), t.prevalence))
        .collect();
    let generated: Vec<GeneratedImage> = (0..config.n_images as u64)
        .into_par_iter()
        .map(|i| generate_image(config, &tags, i))
        .collect();

    let mut images = IndexMap::new();
    let mut ground_truth = Vec::new();
    let mut scene = SceneTags::default();
    for (i, g) in generated.into_iter().enumerate() {
        let id = ImageId::from(i as u64 + 1);
        for (class_id, bbox) in g.objects {
            ground_truth.push(GroundTruthInstance {
                id: ground_truth.len() as u64 + 1,
                image_id: id.clone(),
                class_id,
                bbox,
            });
        }
        scene.tags.insert(id.as_str().to_string(), g.tags);
        images.insert(
            id.clone(),
            ImageRecord {
                image_id: id,
                file_name: format!("synth_{:06}.jpg", i + 1),
                width: config.image_size.0,
                height: config.image_size.1,
                scene_tags: BTreeSet::new(),
            },
        );
    }
    let classes = config
        .classes
        .iter()
        .enumerate()
        .map(|(i, n)| ClassId::new(i as u32 + 1, n.trim()).expect("validated"))
        .collect();
    let dataset = Dataset {
        images,
        classes,
        ground_truth,
        provenance: Vec::new(),
    };
    Ok((dataset, scene))
}

fn tags_of<'a>(tags: &'a SceneTags, image: &ImageRecord) -> Option<&'a BTreeSet<String>> {
    tags.tags
        .get(image.image_id.as_str())
        .or_else(|| tags.tags.get(&image.file_name))
}

fn jitter(s: &mut Stream, b: &BoundingBox, j: f64, bounds: (f64, f64)) -> BoundingBox {
    let mut shift = |side: f64| side * s.uniform(-j, j);
    let dx = shift(b.w());
    let dy = shift(b.h());
    let dw = shift(b.w());
    let dh = shift(b.h());
    let x0 = (b.x() + dx).clamp(0.0, bounds.0 - 1.0);
    let y0 = (b.y() + dy).clamp(0.0, bounds.1 - 1.0);
    let x1 = (b.x() + dx + b.w() + dw).clamp(x0 + 1.0, bounds.0);
    let y1 = (b.y() + dy + b.h() + dh).clamp(y0 + 1.0, bounds.1);
    BoundingBox::new(x0, y0, x1 - x0, y1 - y0).expect("clamped box is valid")
}

/// Runs the mock detector over every image of `dataset`.
pub fn mock_detect(
    dataset: &Dataset,
    tags: &SceneTags,
    config: &MockDetectorConfig,
) -> Result<PredictionSet, SynthError> {
    config.validate()?;
    let boosts = config.boosts()?;
    let class_ids: Vec<u32> = dataset.classes.iter().map(|c| c.id).collect();
    let p_wrong = effective_misclass(config, class_ids.len());
    let mut by_image: IndexMap<&ImageId, Vec<&GroundTruthInstance>> =
        dataset.images.keys().map(|id| (id, Vec::new())).collect();
    for g in &dataset.ground_truth {
        if let Some(v) = by_image.get_mut(&g.image_id) {
            v.push(g);
        }
    }
    let empty = BTreeSet::new();
    let images: Vec<(&ImageRecord, &Vec<&GroundTruthInstance>)> = dataset
        .images
        .values()
        .map(|img| (img, &by_image[&img.image_id]))
        .collect();
    let per_image: Vec<Vec<Detection>> = images
        .par_iter()
        .enumerate()
        .map(|(i, (img, gts))| {
            let mut s = substream(config.seed, DOMAIN_DETECT, i as u64);
            let present = tags_of(tags, img).unwrap_or(&empty);
            let p_hit = correct_probability(present, config.p_base, &boosts, 0.0);
            let bounds = (f64::from(img.width.max(1)), f64::from(img.height.max(1)));
            let mut out = Vec::new();
            for g in gts.iter() {
                if !s.bernoulli(p_hit) {
                    continue;
                }
                let (class_id, (lo, hi)) = if p_wrong > 0.0 && s.bernoulli(p_wrong) {
                    let others: Vec<u32> = class_ids.iter().copied().filter(|&c| c != g.class_id).collect();
                    (others[s.index(others.len())], config.spurious_confidence)
                } else {
                    (g.class_id, config.hit_confidence)
                };
                let bbox = jitter(&mut s, &g.bbox, config.bbox_jitter, bounds);
                let conf = s.uniform(lo, hi);
                out.push(Detection::new(img.image_id.clone(), class_id, bbox, conf).expect("valid detection"));
                if s.bernoulli(config.p_duplicate) {
                    let (lo, hi) = config.spurious_confidence;
                    // keeps the duplicate strictly behind the hit in matching order
                    let conf = s.uniform(lo, hi).min(conf * 0.999);
                    let bbox = jitter(&mut s, &g.bbox, config.bbox_jitter, bounds);
                    out.push(Detection::new(img.image_id.clone(), class_id, bbox, conf).expect("valid detection"));
                }
            }
            out
        })
        .collect();
    let detections: Vec<Detection> = per_image.into_iter().flatten().collect();
    let set = PredictionSet {
        provenance: Provenance::of_bytes(&[]),
        detections,
    };
    let bytes = predictions_bytes(&set);
    Ok(PredictionSet {
        provenance: Provenance::of_bytes(&bytes),
        ..set
    })
}

/// Expected accuracy per condition over the generating distribution, or
/// `None` when no image can satisfy the condition. Tags the condition does
/// not mention are summed over all presence patterns, weighted by their
/// prevalences.
pub fn planted_effect_truth(
    synth: &SynthConfig,
    detector: &MockDetectorConfig,
    conditions: &[Condition],
) -> Result<BTreeMap<String, Option<f64>>, SynthError> {
    synth.validate()?;
    detector.validate()?;
    let boosts = detector.boosts()?;
    let p_wrong = effective_misclass(detector, synth.classes.len());
    let tags: Vec<(String, f64)> = synth
        .context_tags
        .iter()
        .map(|t| (canonical_tag(&t.tag).expect("validated"), t.prevalence))
        .collect();
    let mut out = BTreeMap::new();
    for c in conditions {
        let mut mass = 0.0;
        let mut expected = 0.0;
        for mask in 0u64..(1 << tags.len()) {
            let present: BTreeSet<String> = tags
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, (t, _))| t.clone())
                .collect();
            if !c.admits(&present) {
                continue;
            }
            let weight: f64 = tags
                .iter()
                .enumerate()
                .map(|(i, (_, p))| if mask >> i & 1 == 1 { *p } else { 1.0 - p })
                .product();
            mass += weight;
            expected += weight * correct_probability(&present, detector.p_base, &boosts, p_wrong);
        }
        out.insert(c.name.clone(), (mass > 0.0).then(|| expected / mass));
    }
    Ok(out)
}

/// Ground-truth-weighted mean of the per-object probability of a correct
/// detection over the given images, using the images' joined scene tags.
pub fn expected_accuracy(
    universe: &EvaluationUniverse,
    image_ids: &[ImageId],
    detector: &MockDetectorConfig,
) -> Result<Option<f64>, SynthError> {
    detector.validate()?;
    let boosts = detector.boosts()?;
    let p_wrong = effective_misclass(detector, universe.dataset.classes.len());
    let (mut sum, mut total) = (0.0, 0usize);
    for id in image_ids {
        let Some(img) = universe.image(id) else { continue };
        let n = universe.ground_truth_for(id).len();
        sum += n as f64 * correct_probability(&img.scene_tags, detector.p_base, &boosts, p_wrong);
        total += n;
    }
    Ok((total > 0).then(|| sum / total as f64))
}

fn predictions_bytes(set: &PredictionSet) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(&set.to_json()).expect("serializes");
    s.push('\n');
    s.into_bytes()
}

/// The three interchange files, byte for byte as written to disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthFiles {
    pub annotations: Vec<u8>,
    pub predictions: Vec<u8>,
    pub tags: Vec<u8>,
}

pub fn render_files(dataset: &Dataset, tags: &SceneTags, predictions: &PredictionSet) -> SynthFiles {
    let mut annotations = serde_json::to_string_pretty(&dataset.to_coco_json()).expect("serializes");
    annotations.push('\n');
    SynthFiles {
        annotations: annotations.into_bytes(),
        predictions: predictions_bytes(predictions),
        tags: tags.to_csv().into_bytes(),
    }
}
