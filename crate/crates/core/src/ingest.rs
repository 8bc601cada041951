//! Parsing and validation of the three study inputs:
//!
//! * COCO object-detection annotations (`images`, `categories`, `annotations`),
//! * COCO results arrays (`image_id`, `category_id`, `bbox`, `score`),
//! * a scene-tag sidecar, either CSV (`image_id,tags` with `;`-separated tags)
//!   or JSON (`{"<image_id>": ["tag", ...]}` or `[{"image_id": .., "tags": [..]}]`).
//!
//! Parsing is strict by default: unknown fields are schema errors. Lenient
//! mode reports them as warnings instead. Known optional COCO fields such as
//! `info`, `licenses`, `area` or `iscrowd` are accepted in both modes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::{
    canonical_tag, BoundingBox, ClassId, CoreError, Detection, GroundTruthInstance, ImageId,
    ImageRecord,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{origin}: malformed input: {message}")]
    Parse { origin: String, message: String },
    #[error("{origin}: schema error at {path}: {message}")]
    Schema {
        origin: String,
        path: String,
        message: String,
    },
    #[error("{origin}: invalid value at {path}: {message}")]
    Invariant {
        origin: String,
        path: String,
        message: String,
    },
    #[error("{origin}: image {image_id} is listed more than once with conflicting tags")]
    DuplicateImage { origin: String, image_id: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl IngestError {
    fn with_origin(self, new_origin: &str) -> Self {
        match self {
            IngestError::Parse { message, .. } => IngestError::Parse {
                origin: new_origin.into(),
                message,
            },
            IngestError::Schema { path, message, .. } => IngestError::Schema {
                origin: new_origin.into(),
                path,
                message,
            },
            IngestError::Invariant { path, message, .. } => IngestError::Invariant {
                origin: new_origin.into(),
                path,
                message,
            },
            IngestError::DuplicateImage { image_id, .. } => IngestError::DuplicateImage {
                origin: new_origin.into(),
                image_id,
            },
            io @ IngestError::Io { .. } => io,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Downgrade unknown fields from errors to warnings.
    pub lenient: bool,
}

/// Where an input came from and what it contained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub path: Option<String>,
    pub sha256: String,
}

impl Provenance {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Self {
            path: None,
            sha256: sha256_hex(bytes),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: IndexMap<ImageId, ImageRecord>,
    pub classes: Vec<ClassId>,
    pub ground_truth: Vec<GroundTruthInstance>,
    pub provenance: Vec<Provenance>,
}

impl Dataset {
    pub fn class(&self, id: u32) -> Option<&ClassId> {
        self.classes.iter().find(|c| c.id == id)
    }

    /// Serializes back to COCO annotation JSON in input order.
    pub fn to_coco_json(&self) -> Value {
        let images: Vec<Value> = self
            .images
            .values()
            .map(|img| {
                json!({
                    "id": img.image_id,
                    "file_name": img.file_name,
                    "width": img.width,
                    "height": img.height,
                })
            })
            .collect();
        let categories: Vec<Value> = self
            .classes
            .iter()
            .map(|c| json!({"id": c.id, "name": c.name}))
            .collect();
        let annotations: Vec<Value> = self
            .ground_truth
            .iter()
            .map(|g| {
                json!({
                    "id": g.id,
                    "image_id": g.image_id,
                    "category_id": g.class_id,
                    "bbox": g.bbox,
                })
            })
            .collect();
        json!({"images": images, "categories": categories, "annotations": annotations})
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub detections: Vec<Detection>,
    pub provenance: Provenance,
}

impl PredictionSet {
    pub fn to_json(&self) -> Value {
        Value::Array(
            self.detections
                .iter()
                .map(|d| {
                    json!({
                        "image_id": d.image_id,
                        "category_id": d.class_id,
                        "bbox": d.bbox,
                        "score": d.confidence(),
                    })
                })
                .collect(),
        )
    }
}

/// Scene tags keyed by the image identifier as written in the tag file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneTags {
    pub tags: IndexMap<String, BTreeSet<String>>,
    pub provenance: Option<Provenance>,
}

impl SceneTags {
    /// Renders the CSV sidecar format.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,tags\n");
        for (id, tags) in &self.tags {
            out.push_str(id);
            out.push(',');
            out.push_str(&tags.iter().cloned().collect::<Vec<_>>().join(";"));
            out.push('\n');
        }
        out
    }
}

/// Collects problems that lenient mode tolerates.
struct Checker<'a> {
    origin: &'a str,
    lenient: bool,
    warnings: Vec<String>,
}

impl<'a> Checker<'a> {
    fn schema(&self, path: &str, message: impl fmt::Display) -> IngestError {
        IngestError::Schema {
            origin: self.origin.into(),
            path: path.into(),
            message: message.to_string(),
        }
    }

    fn invariant(&self, path: &str, message: impl fmt::Display) -> IngestError {
        IngestError::Invariant {
            origin: self.origin.into(),
            path: path.into(),
            message: message.to_string(),
        }
    }

    fn object<'v>(&self, v: &'v Value, path: &str) -> Result<&'v Map<String, Value>, IngestError> {
        v.as_object()
            .ok_or_else(|| self.schema(path, format!("expected an object, found {}", kind(v))))
    }

    fn array<'v>(&self, v: &'v Value, path: &str) -> Result<&'v Vec<Value>, IngestError> {
        v.as_array()
            .ok_or_else(|| self.schema(path, format!("expected an array, found {}", kind(v))))
    }

    fn field<'v>(
        &self,
        obj: &'v Map<String, Value>,
        key: &str,
        path: &str,
    ) -> Result<&'v Value, IngestError> {
        obj.get(key)
            .ok_or_else(|| self.schema(&format!("{path}.{key}"), "missing required field"))
    }

    fn check_keys(
        &mut self,
        obj: &Map<String, Value>,
        allowed: &[&str],
        path: &str,
    ) -> Result<(), IngestError> {
        for key in obj.keys() {
            if !allowed.contains(&key.as_str()) {
                let at = format!("{path}.{key}");
                if self.lenient {
                    self.warnings
                        .push(format!("{}: ignoring unknown field {at}", self.origin));
                } else {
                    return Err(self.schema(&at, "unknown field (use lenient mode to ignore)"));
                }
            }
        }
        Ok(())
    }

    fn uint(&self, v: &Value, path: &str) -> Result<u64, IngestError> {
        v.as_u64().ok_or_else(|| {
            self.schema(path, format!("expected a non-negative integer, found {v}"))
        })
    }

    fn real(&self, v: &Value, path: &str) -> Result<f64, IngestError> {
        v.as_f64()
            .ok_or_else(|| self.schema(path, format!("expected a number, found {v}")))
    }

    fn string<'v>(&self, v: &'v Value, path: &str) -> Result<&'v str, IngestError> {
        v.as_str()
            .ok_or_else(|| self.schema(path, format!("expected a string, found {v}")))
    }

    fn image_id(&self, v: &Value, path: &str) -> Result<ImageId, IngestError> {
        match v {
            Value::Number(n) => n
                .as_u64()
                .map(ImageId::from)
                .ok_or_else(|| self.schema(path, format!("invalid image id {v}"))),
            Value::String(s) if !s.is_empty() => Ok(ImageId::new(s.clone())),
            _ => Err(self.schema(path, format!("expected an integer or string id, found {v}"))),
        }
    }

    fn class_id(&self, v: &Value, path: &str) -> Result<u32, IngestError> {
        let n = self.uint(v, path)?;
        u32::try_from(n).map_err(|_| self.invariant(path, format!("class id {n} out of range")))
    }

    fn bbox(&self, v: &Value, path: &str) -> Result<BoundingBox, IngestError> {
        let arr = self.array(v, path)?;
        if arr.len() != 4 {
            return Err(self.schema(path, format!("bbox needs 4 numbers, found {}", arr.len())));
        }
        let mut xywh = [0.0; 4];
        for (i, (slot, item)) in xywh.iter_mut().zip(arr).enumerate() {
            *slot = self.real(item, &format!("{path}[{i}]"))?;
        }
        BoundingBox::new(xywh[0], xywh[1], xywh[2], xywh[3])
            .map_err(|e| self.invariant(path, e))
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn parse_json(bytes: &[u8], origin: &str) -> Result<Value, IngestError> {
    serde_json::from_slice(bytes).map_err(|e| IngestError::Parse {
        origin: origin.into(),
        message: e.to_string(),
    })
}

const TOP_LEVEL_KEYS: &[&str] = &["images", "categories", "annotations", "info", "licenses"];
const IMAGE_KEYS: &[&str] = &[
    "id",
    "file_name",
    "width",
    "height",
    "license",
    "coco_url",
    "flickr_url",
    "date_captured",
];
const CATEGORY_KEYS: &[&str] = &["id", "name", "supercategory"];
const ANNOTATION_KEYS: &[&str] = &[
    "id",
    "image_id",
    "category_id",
    "bbox",
    "area",
    "iscrowd",
    "segmentation",
];
const RESULT_KEYS: &[&str] = &["image_id", "category_id", "bbox", "score"];

pub fn parse_annotations(bytes: &[u8]) -> Result<Dataset, IngestError> {
    parse_annotations_with(bytes, ParseOptions::default()).map(|(d, _)| d)
}

/// Parses COCO annotations, returning the dataset and any lenient-mode warnings.
pub fn parse_annotations_with(
    bytes: &[u8],
    options: ParseOptions,
) -> Result<(Dataset, Vec<String>), IngestError> {
    let origin = "annotations";
    let root = parse_json(bytes, origin)?;
    let mut ck = Checker {
        origin,
        lenient: options.lenient,
        warnings: Vec::new(),
    };
    let top = ck.object(&root, "$")?;
    ck.check_keys(top, TOP_LEVEL_KEYS, "$")?;

    let mut images = IndexMap::new();
    for (i, v) in ck.array(ck.field(top, "images", "$")?, "$.images")?.iter().enumerate() {
        let path = format!("$.images[{i}]");
        let obj = ck.object(v, &path)?;
        ck.check_keys(obj, IMAGE_KEYS, &path)?;
        let image_id = ck.image_id(ck.field(obj, "id", &path)?, &format!("{path}.id"))?;
        let file_name = ck
            .string(ck.field(obj, "file_name", &path)?, &format!("{path}.file_name"))?
            .to_string();
        let dim = |key: &str| -> Result<u32, IngestError> {
            let at = format!("{path}.{key}");
            let n = ck.uint(ck.field(obj, key, &path)?, &at)?;
            match u32::try_from(n) {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(ck.invariant(&at, format!("{key} must be a positive integer, got {n}"))),
            }
        };
        let width = dim("width")?;
        let height = dim("height")?;
        if images.contains_key(&image_id) {
            return Err(ck.invariant(&path, format!("duplicate image id {image_id}")));
        }
        images.insert(
            image_id.clone(),
            ImageRecord {
                image_id,
                file_name,
                width,
                height,
                scene_tags: BTreeSet::new(),
            },
        );
    }

    let mut classes: Vec<ClassId> = Vec::new();
    for (i, v) in ck
        .array(ck.field(top, "categories", "$")?, "$.categories")?
        .iter()
        .enumerate()
    {
        let path = format!("$.categories[{i}]");
        let obj = ck.object(v, &path)?;
        ck.check_keys(obj, CATEGORY_KEYS, &path)?;
        let id = ck.class_id(ck.field(obj, "id", &path)?, &format!("{path}.id"))?;
        let name = ck.string(ck.field(obj, "name", &path)?, &format!("{path}.name"))?;
        let class = ClassId::new(id, name).map_err(|e| ck.invariant(&path, e))?;
        if classes.iter().any(|c| c.id == id) {
            return Err(ck.invariant(&path, format!("duplicate category id {id}")));
        }
        classes.push(class);
    }

    let mut ground_truth = Vec::new();
    for (i, v) in ck
        .array(ck.field(top, "annotations", "$")?, "$.annotations")?
        .iter()
        .enumerate()
    {
        let path = format!("$.annotations[{i}]");
        let obj = ck.object(v, &path)?;
        ck.check_keys(obj, ANNOTATION_KEYS, &path)?;
        let id = ck.uint(ck.field(obj, "id", &path)?, &format!("{path}.id"))?;
        let image_id =
            ck.image_id(ck.field(obj, "image_id", &path)?, &format!("{path}.image_id"))?;
        if !images.contains_key(&image_id) {
            return Err(ck.invariant(
                &format!("{path}.image_id"),
                format!("unknown image id {image_id}"),
            ));
        }
        let class_id =
            ck.class_id(ck.field(obj, "category_id", &path)?, &format!("{path}.category_id"))?;
        if !classes.iter().any(|c| c.id == class_id) {
            return Err(ck.invariant(
                &format!("{path}.category_id"),
                format!("undeclared category id {class_id}"),
            ));
        }
        let bbox = ck.bbox(ck.field(obj, "bbox", &path)?, &format!("{path}.bbox"))?;
        ground_truth.push(GroundTruthInstance {
            id,
            image_id,
            class_id,
            bbox,
        });
    }

    let dataset = Dataset {
        images,
        classes,
        ground_truth,
        provenance: vec![Provenance::of_bytes(bytes)],
    };
    Ok((dataset, ck.warnings))
}

pub fn parse_predictions(bytes: &[u8]) -> Result<PredictionSet, IngestError> {
    parse_predictions_with(bytes, ParseOptions::default()).map(|(p, _)| p)
}

pub fn parse_predictions_with(
    bytes: &[u8],
    options: ParseOptions,
) -> Result<(PredictionSet, Vec<String>), IngestError> {
    let origin = "predictions";
    let root = parse_json(bytes, origin)?;
    let mut ck = Checker {
        origin,
        lenient: options.lenient,
        warnings: Vec::new(),
    };
    let mut detections = Vec::new();
    for (i, v) in ck.array(&root, "$")?.iter().enumerate() {
        let path = format!("$[{i}]");
        let obj = ck.object(v, &path)?;
        ck.check_keys(obj, RESULT_KEYS, &path)?;
        let image_id =
            ck.image_id(ck.field(obj, "image_id", &path)?, &format!("{path}.image_id"))?;
        let class_id =
            ck.class_id(ck.field(obj, "category_id", &path)?, &format!("{path}.category_id"))?;
        let bbox = ck.bbox(ck.field(obj, "bbox", &path)?, &format!("{path}.bbox"))?;
        let score = ck.real(ck.field(obj, "score", &path)?, &format!("{path}.score"))?;
        let detection = Detection::new(image_id, class_id, bbox, score).map_err(|e| match e {
            CoreError::InvalidConfidence(_) => ck.invariant(&format!("{path}.score"), e),
            other => ck.invariant(&path, other),
        })?;
        detections.push(detection);
    }
    let set = PredictionSet {
        detections,
        provenance: Provenance::of_bytes(bytes),
    };
    Ok((set, ck.warnings))
}

/// Parses a scene-tag file. The format is chosen by the first
/// non-whitespace byte: `{` or `[` means JSON, anything else CSV.
pub fn parse_scene_tags(bytes: &[u8]) -> Result<SceneTags, IngestError> {
    let origin = "tags";
    let first = bytes.iter().find(|b| !b.is_ascii_whitespace());
    let rows = match first {
        Some(b'{') | Some(b'[') => tag_rows_from_json(bytes, origin)?,
        _ => tag_rows_from_csv(bytes, origin)?,
    };
    let mut tags: IndexMap<String, BTreeSet<String>> = IndexMap::new();
    for (id, raw) in rows {
        let set: BTreeSet<String> = raw.iter().filter_map(|t| canonical_tag(t)).collect();
        let id = id.trim().to_string();
        if id.is_empty() {
            return Err(IngestError::Parse {
                origin: origin.into(),
                message: "row with empty image_id".into(),
            });
        }
        match tags.get(&id) {
            Some(existing) if *existing != set => {
                return Err(IngestError::DuplicateImage {
                    origin: origin.into(),
                    image_id: id,
                })
            }
            Some(_) => {}
            None => {
                tags.insert(id, set);
            }
        }
    }
    Ok(SceneTags {
        tags,
        provenance: Some(Provenance::of_bytes(bytes)),
    })
}

fn tag_rows_from_csv(bytes: &[u8], origin: &str) -> Result<Vec<(String, Vec<String>)>, IngestError> {
    let perr = |message: String| IngestError::Parse {
        origin: origin.into(),
        message,
    };
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::Headers)
        .from_reader(bytes);
    let headers = reader.headers().map_err(|e| perr(e.to_string()))?.clone();
    if headers.len() != 2 || &headers[0] != "image_id" || &headers[1] != "tags" {
        return Err(perr(format!(
            "expected header \"image_id,tags\", found {:?}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| perr(e.to_string()))?;
        if record.len() > 2 || record.is_empty() {
            return Err(perr(format!(
                "row {}: expected 2 fields, found {}",
                line + 2,
                record.len()
            )));
        }
        let id = record[0].to_string();
        let tags = record
            .get(1)
            .map(|t| t.split(';').map(str::to_string).collect())
            .unwrap_or_default();
        rows.push((id, tags));
    }
    Ok(rows)
}

/// JSON object entries, keeping duplicates so they can be reported.
struct Entries(Vec<(String, Vec<String>)>);

impl<'de> Deserialize<'de> for Entries {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> serde::de::Visitor<'de> for V {
            type Value = Entries;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping image ids to tag arrays")
            }
            fn visit_map<A: serde::de::MapAccess<'de>>(self, mut map: A) -> Result<Entries, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Vec<String>>()? {
                    out.push((k, v));
                }
                Ok(Entries(out))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TagRecord {
    image_id: ImageId,
    tags: Vec<String>,
}

fn tag_rows_from_json(
    bytes: &[u8],
    origin: &str,
) -> Result<Vec<(String, Vec<String>)>, IngestError> {
    let perr = |e: serde_json::Error| IngestError::Parse {
        origin: origin.into(),
        message: e.to_string(),
    };
    let first = bytes.iter().find(|b| !b.is_ascii_whitespace());
    if first == Some(&b'[') {
        let records: Vec<TagRecord> = serde_json::from_slice(bytes).map_err(perr)?;
        Ok(records
            .into_iter()
            .map(|r| (r.image_id.to_string(), r.tags))
            .collect())
    } else {
        let entries: Entries = serde_json::from_slice(bytes).map_err(perr)?;
        Ok(entries.0)
    }
}

/// Dataset with tags attached and predictions grouped by image.
#[derive(Debug, Clone)]
pub struct EvaluationUniverse {
    pub dataset: Dataset,
    pub predictions: HashMap<ImageId, Vec<Detection>>,
    pub prediction_provenance: Option<Provenance>,
    pub tag_provenance: Option<Provenance>,
    gt_by_image: HashMap<ImageId, Vec<usize>>,
    pub warnings: Vec<String>,
}

impl EvaluationUniverse {
    pub fn image(&self, id: &ImageId) -> Option<&ImageRecord> {
        self.dataset.images.get(id)
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &ImageId> {
        self.dataset.images.keys()
    }

    pub fn ground_truth_for(&self, id: &ImageId) -> Vec<&GroundTruthInstance> {
        self.gt_by_image
            .get(id)
            .map(|idx| idx.iter().map(|&i| &self.dataset.ground_truth[i]).collect())
            .unwrap_or_default()
    }

    pub fn detections_for(&self, id: &ImageId) -> &[Detection] {
        self.predictions.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Per-class instance counts for one image, over the dataset's classes.
    pub fn class_counts(&self, id: &ImageId) -> BTreeMap<u32, u64> {
        let mut counts: BTreeMap<u32, u64> =
            self.dataset.classes.iter().map(|c| (c.id, 0)).collect();
        for g in self.ground_truth_for(id) {
            *counts.entry(g.class_id).or_default() += 1;
        }
        counts
    }
}

/// Attaches tags and indexes predictions. Unresolvable ids become warnings.
///
/// A tag key resolves to the image with that id, or failing that to the
/// image with that file name.
pub fn join(
    mut dataset: Dataset,
    tags: &SceneTags,
    predictions: Option<&PredictionSet>,
) -> EvaluationUniverse {
    let mut warnings = Vec::new();

    let by_name: HashMap<&str, ImageId> = dataset
        .images
        .values()
        .map(|img| (img.file_name.as_str(), img.image_id.clone()))
        .collect();
    let mut assigned: Vec<(ImageId, &BTreeSet<String>, &str)> = Vec::new();
    for (key, set) in &tags.tags {
        let id = ImageId::new(key.clone());
        let resolved = if dataset.images.contains_key(&id) {
            Some(id)
        } else {
            by_name.get(key.as_str()).cloned()
        };
        match resolved {
            Some(id) => assigned.push((id, set, key)),
            None => warnings.push(format!("tags given for unknown image {key}")),
        }
    }
    let mut seen: HashMap<ImageId, &str> = HashMap::new();
    for (id, set, key) in assigned {
        if let Some(prev) = seen.get(&id) {
            warnings.push(format!(
                "tag rows {prev} and {key} both resolve to image {id}; keeping {prev}"
            ));
            continue;
        }
        seen.insert(id.clone(), key);
        if let Some(img) = dataset.images.get_mut(&id) {
            img.scene_tags = set.clone();
        }
    }

    let mut gt_by_image: HashMap<ImageId, Vec<usize>> = HashMap::new();
    for (i, g) in dataset.ground_truth.iter().enumerate() {
        gt_by_image.entry(g.image_id.clone()).or_default().push(i);
    }

    let mut by_image: HashMap<ImageId, Vec<Detection>> = HashMap::new();
    let mut orphans: IndexMap<ImageId, usize> = IndexMap::new();
    let mut unknown_classes: BTreeMap<u32, usize> = BTreeMap::new();
    if let Some(predictions) = predictions {
        for d in &predictions.detections {
            if !dataset.images.contains_key(&d.image_id) {
                *orphans.entry(d.image_id.clone()).or_default() += 1;
                continue;
            }
            if dataset.class(d.class_id).is_none() {
                *unknown_classes.entry(d.class_id).or_default() += 1;
            }
            by_image.entry(d.image_id.clone()).or_default().push(d.clone());
        }
    }
    for (id, n) in orphans {
        warnings.push(format!("{n} prediction(s) for unknown image {id}"));
    }
    for (class, n) in unknown_classes {
        warnings.push(format!("{n} prediction(s) with undeclared category {class}"));
    }

    EvaluationUniverse {
        dataset,
        predictions: by_image,
        prediction_provenance: predictions.map(|p| p.provenance.clone()),
        tag_provenance: tags.provenance.clone(),
        gt_by_image,
        warnings,
    }
}

fn read(path: &Path) -> Result<Vec<u8>, IngestError> {
    std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_annotations(
    path: &Path,
    options: ParseOptions,
) -> Result<(Dataset, Vec<String>), IngestError> {
    let origin = path.display().to_string();
    let (mut dataset, warnings) =
        parse_annotations_with(&read(path)?, options).map_err(|e| e.with_origin(&origin))?;
    for p in &mut dataset.provenance {
        p.path = Some(origin.clone());
    }
    Ok((dataset, warnings))
}

pub fn load_predictions(
    path: &Path,
    options: ParseOptions,
) -> Result<(PredictionSet, Vec<String>), IngestError> {
    let origin = path.display().to_string();
    let (mut set, warnings) =
        parse_predictions_with(&read(path)?, options).map_err(|e| e.with_origin(&origin))?;
    set.provenance.path = Some(origin);
    Ok((set, warnings))
}

pub fn load_scene_tags(path: &Path) -> Result<SceneTags, IngestError> {
    let origin = path.display().to_string();
    let mut tags = parse_scene_tags(&read(path)?).map_err(|e| e.with_origin(&origin))?;
    if let Some(p) = tags.provenance.as_mut() {
        p.path = Some(origin);
    }
    Ok(tags)
}
