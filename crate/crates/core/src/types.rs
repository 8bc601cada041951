//! Domain types shared by every stage of a study, plus the elementary
//! geometry and class-distribution functions built on them.
//!
//! Boxes use the top-left `(x, y, w, h)` convention of COCO. All values are
//! immutable after construction and validated when built.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Tolerance used when checking that a distribution sums to one.
pub const DISTRIBUTION_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoreError {
    #[error("invalid bounding box [{x}, {y}, {w}, {h}]: {reason}")]
    InvalidBox {
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        reason: &'static str,
    },
    #[error("confidence {0} is outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("class name for id {0} is empty")]
    EmptyClassName(u32),
    #[error("cannot compute a class distribution from zero instances")]
    EmptyInstanceSet,
    #[error("instance has class {0}, which is not in the class list")]
    UnknownClass(u32),
    #[error("class universes differ: {left:?} vs {right:?}")]
    ClassUniverseMismatch { left: Vec<u32>, right: Vec<u32> },
    #[error("invalid class distribution: {0}")]
    InvalidDistribution(String),
}

/// Axis-aligned box in pixel coordinates, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, CoreError> {
        let invalid = |reason| CoreError::InvalidBox { x, y, w, h, reason };
        if !(x.is_finite() && y.is_finite()) {
            return Err(invalid("origin must be finite"));
        }
        if !(w.is_finite() && w > 0.0) {
            return Err(invalid("width must be positive"));
        }
        if !(h.is_finite() && h > 0.0) {
            return Err(invalid("height must be positive"));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    /// Total order over boxes by `(x, y, w, h)`, used to break ties.
    pub fn geometric_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.x
            .total_cmp(&other.x)
            .then(self.y.total_cmp(&other.y))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
    }
}

impl Serialize for BoundingBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x, y, w, h] = <[f64; 4]>::deserialize(deserializer)?;
        BoundingBox::new(x, y, w, h).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let left = a.x.max(b.x);
    let top = a.y.max(b.y);
    let right = a.right().min(b.right());
    let bottom = a.bottom().min(b.bottom());
    if right <= left || bottom <= top {
        return 0.0;
    }
    let intersection = (right - left) * (bottom - top);
    let union = a.area() + b.area() - intersection;
    (intersection / union).clamp(0.0, 1.0)
}

/// Image identifier. COCO files use integers, tag sidecars often use
/// strings; both are held in their decimal/string form so they join.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageId(String);

impl ImageId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn as_integer(&self) -> Option<u64> {
        let n: u64 = self.0.parse().ok()?;
        (n.to_string() == self.0).then_some(n)
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<u64> for ImageId {
    fn from(n: u64) -> Self {
        Self(n.to_string())
    }
}

impl From<&str> for ImageId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

impl Serialize for ImageId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self.as_integer() {
            Some(n) => serializer.serialize_u64(n),
            None => serializer.serialize_str(&self.0),
        }
    }
}

impl<'de> Deserialize<'de> for ImageId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        Ok(match Raw::deserialize(deserializer)? {
            Raw::Int(n) => ImageId::from(n),
            Raw::Str(s) => ImageId(s),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassId {
    pub id: u32,
    pub name: String,
}

impl ClassId {
    pub fn new(id: u32, name: impl Into<String>) -> Result<Self, CoreError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(CoreError::EmptyClassName(id));
        }
        Ok(Self { id, name })
    }
}

/// A labeled object to detect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub id: u64,
    pub image_id: ImageId,
    pub class_id: u32,
    pub bbox: BoundingBox,
}

/// A scored prediction box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: ImageId,
    pub class_id: u32,
    pub bbox: BoundingBox,
    confidence: f64,
}

impl Detection {
    pub fn new(
        image_id: ImageId,
        class_id: u32,
        bbox: BoundingBox,
        confidence: f64,
    ) -> Result<Self, CoreError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(CoreError::InvalidConfidence(confidence));
        }
        Ok(Self {
            image_id,
            class_id,
            bbox,
            confidence,
        })
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }
}

/// Lowercases and trims a scene tag. Returns `None` for blank tags.
pub fn canonical_tag(raw: &str) -> Option<String> {
    let tag = raw.trim().to_lowercase();
    (!tag.is_empty()).then_some(tag)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub scene_tags: BTreeSet<String>,
}

/// Per-class share of ground-truth instances, keyed by class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<u32, f64>", into = "BTreeMap<u32, f64>")]
pub struct ClassDistribution {
    proportions: BTreeMap<u32, f64>,
}

impl ClassDistribution {
    pub fn new(proportions: BTreeMap<u32, f64>) -> Result<Self, CoreError> {
        if proportions.is_empty() {
            return Err(CoreError::InvalidDistribution("no classes".into()));
        }
        if let Some((c, p)) = proportions
            .iter()
            .find(|(_, p)| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(CoreError::InvalidDistribution(format!(
                "class {c} has proportion {p}"
            )));
        }
        let sum: f64 = proportions.values().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_SUM_TOLERANCE {
            return Err(CoreError::InvalidDistribution(format!(
                "proportions sum to {sum}"
            )));
        }
        Ok(Self { proportions })
    }

    /// Builds a distribution from raw per-class counts over a fixed universe.
    pub fn from_counts(counts: &BTreeMap<u32, u64>) -> Result<Self, CoreError> {
        let total: u64 = counts.values().sum();
        if total == 0 {
            return Err(CoreError::EmptyInstanceSet);
        }
        let proportions = counts
            .iter()
            .map(|(&c, &n)| (c, n as f64 / total as f64))
            .collect();
        Ok(Self { proportions })
    }

    pub fn get(&self, class_id: u32) -> Option<f64> {
        self.proportions.get(&class_id).copied()
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.proportions.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.proportions.iter().map(|(&c, &p)| (c, p))
    }

    pub fn len(&self) -> usize {
        self.proportions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proportions.is_empty()
    }
}

impl TryFrom<BTreeMap<u32, f64>> for ClassDistribution {
    type Error = CoreError;

    fn try_from(map: BTreeMap<u32, f64>) -> Result<Self, Self::Error> {
        Self::new(map)
    }
}

impl From<ClassDistribution> for BTreeMap<u32, f64> {
    fn from(d: ClassDistribution) -> Self {
        d.proportions
    }
}

pub fn compute_class_distribution(
    instances: &[GroundTruthInstance],
    classes: &[ClassId],
) -> Result<ClassDistribution, CoreError> {
    if instances.is_empty() {
        return Err(CoreError::EmptyInstanceSet);
    }
    let mut counts: BTreeMap<u32, u64> = classes.iter().map(|c| (c.id, 0)).collect();
    for inst in instances {
        *counts
            .get_mut(&inst.class_id)
            .ok_or(CoreError::UnknownClass(inst.class_id))? += 1;
    }
    ClassDistribution::from_counts(&counts)
}

/// L1 distance between two distributions over the same class universe.
pub fn distribution_divergence(
    p: &ClassDistribution,
    q: &ClassDistribution,
) -> Result<f64, CoreError> {
    if !p.classes().eq(q.classes()) {
        return Err(CoreError::ClassUniverseMismatch {
            left: p.classes().collect(),
            right: q.classes().collect(),
        });
    }
    Ok(p.iter()
        .zip(q.iter())
        .map(|((_, a), (_, b))| (a - b).abs())
        .sum())
}
