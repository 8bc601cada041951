//! Construction of fixed-size test sets whose ground-truth class mix matches
//! a target distribution, restricted to images that satisfy a scene-tag
//! condition.
//!
//! Selection works on per-image instance counts. It grows the set greedily,
//! each step adding the pool image that brings the running class mix closest
//! (L1) to the target, then improves it with single swaps until no swap
//! helps or `10 * n` swaps have been made. Ties go to whichever candidate
//! comes first in a seeded shuffle of the pool.
//!
//! When the heuristic result is not already exact, an exhaustive search over
//! reachable class-count totals runs as long as the number of distinct
//! totals stays under [`EXACT_STATE_BUDGET`]. Within budget the returned set
//! is optimal; past it the greedy/swap result stands.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::EvaluationUniverse;
use crate::rng::{substream, DOMAIN_STRATIFY};
use crate::types::{canonical_tag, distribution_divergence, ClassDistribution, CoreError, ImageId};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TOLERANCE: f64 = 0.05;

/// Strict-improvement margin for the swap pass.
const SWAP_EPSILON: f64 = 1e-12;

/// Cap on distinct `(set size, class totals)` states held by the exact search.
pub const EXACT_STATE_BUDGET: usize = 200_000;

#[derive(Debug, Error)]
pub enum StratifyError {
    #[error("invalid condition {name:?}: {reason}")]
    InvalidCondition { name: String, reason: String },
    #[error("duplicate condition name {0:?}")]
    DuplicateCondition(String),
    #[error("condition {condition:?}: pool has {available} eligible images, {requested} requested")]
    PoolTooSmall {
        condition: String,
        available: usize,
        requested: usize,
    },
    #[error(
        "condition {condition:?}: best divergence {divergence:.6} exceeds tolerance {tolerance}"
    )]
    ToleranceUnmet {
        condition: String,
        divergence: f64,
        tolerance: f64,
        best: Box<StratifiedTestSet>,
    },
    #[error("condition {condition:?}: selected images contain no ground-truth instances")]
    NoInstances { condition: String },
    #[error("image {0} is not in the evaluation universe")]
    UnknownImage(ImageId),
    #[error("invalid selection parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

/// A named scene-tag predicate: every required tag present, no forbidden tag present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    #[serde(default)]
    pub required: BTreeSet<String>,
    #[serde(default)]
    pub forbidden: BTreeSet<String>,
}

impl Condition {
    pub fn new<I, J, S, T>(name: impl Into<String>, required: I, forbidden: J) -> Result<Self, StratifyError>
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let name = name.into();
        let required = required.into_iter().filter_map(|t| canonical_tag(t.as_ref())).collect();
        let forbidden = forbidden.into_iter().filter_map(|t| canonical_tag(t.as_ref())).collect();
        let condition = Self {
            name,
            required,
            forbidden,
        };
        condition.validate()?;
        Ok(condition)
    }

    pub fn unconstrained(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            required: BTreeSet::new(),
            forbidden: BTreeSet::new(),
        }
    }

    pub fn validate(&self) -> Result<(), StratifyError> {
        let invalid = |reason: String| StratifyError::InvalidCondition {
            name: self.name.clone(),
            reason,
        };
        if self.name.trim().is_empty() {
            return Err(invalid("name is empty".into()));
        }
        if let Some(t) = self.required.intersection(&self.forbidden).next() {
            return Err(invalid(format!("tag {t:?} is both required and forbidden")));
        }
        for t in self.required.iter().chain(&self.forbidden) {
            if canonical_tag(t).as_deref() != Some(t.as_str()) {
                return Err(invalid(format!("tag {t:?} is not canonical")));
            }
        }
        Ok(())
    }

    pub fn admits(&self, tags: &BTreeSet<String>) -> bool {
        self.required.is_subset(tags) && self.forbidden.is_disjoint(tags)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedTestSet {
    pub condition: Condition,
    pub seed: u64,
    pub tolerance: f64,
    pub image_ids: Vec<ImageId>,
    pub achieved: ClassDistribution,
    pub target: ClassDistribution,
    pub divergence: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    schema_version: u32,
    condition: Condition,
    seed: u64,
    tolerance: f64,
    image_ids: Vec<ImageId>,
    achieved: ClassDistribution,
    target: ClassDistribution,
    divergence: f64,
}

impl StratifiedTestSet {
    pub fn to_manifest_json(&self) -> String {
        let file = ManifestFile {
            schema_version: MANIFEST_SCHEMA_VERSION,
            condition: self.condition.clone(),
            seed: self.seed,
            tolerance: self.tolerance,
            image_ids: self.image_ids.clone(),
            achieved: self.achieved.clone(),
            target: self.target.clone(),
            divergence: self.divergence,
        };
        let mut s = serde_json::to_string_pretty(&file).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_manifest_json(bytes: &[u8]) -> Result<Self, StratifyError> {
        let file: ManifestFile =
            serde_json::from_slice(bytes).map_err(|e| StratifyError::Manifest(e.to_string()))?;
        if file.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(StratifyError::Manifest(format!(
                "unsupported schema_version {}",
                file.schema_version
            )));
        }
        file.condition.validate()?;
        let unique: HashSet<_> = file.image_ids.iter().collect();
        if unique.len() != file.image_ids.len() {
            return Err(StratifyError::Manifest("duplicate image ids".into()));
        }
        let recomputed = distribution_divergence(&file.achieved, &file.target)?;
        if (recomputed - file.divergence).abs() > 1e-9 {
            return Err(StratifyError::Manifest(format!(
                "divergence {} does not match achieved/target ({recomputed})",
                file.divergence
            )));
        }
        Ok(Self {
            condition: file.condition,
            seed: file.seed,
            tolerance: file.tolerance,
            image_ids: file.image_ids,
            achieved: file.achieved,
            target: file.target,
            divergence: file.divergence,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectParams {
    pub n: usize,
    pub seed: u64,
    pub tolerance: f64,
}

/// Images admitted by `condition`, in dataset order.
pub fn eligible_pool(universe: &EvaluationUniverse, condition: &Condition) -> Vec<ImageId> {
    universe
        .dataset
        .images
        .values()
        .filter(|img| condition.admits(&img.scene_tags))
        .map(|img| img.image_id.clone())
        .collect()
}

/// L1 distance between the class mix of `totals` and `target`.
/// An empty mix is treated as all zeros.
fn mix_divergence(totals: &[u64], target: &[f64]) -> f64 {
    let sum: u64 = totals.iter().sum();
    if sum == 0 {
        return target.iter().sum();
    }
    let sum = sum as f64;
    totals
        .iter()
        .zip(target)
        .map(|(&n, &t)| (n as f64 / sum - t).abs())
        .sum()
}

/// Greedy construction plus swap improvement over count vectors.
///
/// `order` is the tie-break order over pool positions. Returns the chosen
/// pool positions and their divergence.
pub(crate) fn select_counts(
    counts: &[Vec<u64>],
    target: &[f64],
    n: usize,
    order: &[usize],
) -> (Vec<usize>, f64) {
    let k = target.len();
    let mut in_set = vec![false; counts.len()];
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    let mut totals = vec![0u64; k];
    let mut scratch = vec![0u64; k];

    for _ in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for &c in order {
            if in_set[c] {
                continue;
            }
            for j in 0..k {
                scratch[j] = totals[j] + counts[c][j];
            }
            let d = mix_divergence(&scratch, target);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((c, d));
            }
        }
        let (c, _) = best.expect("pool larger than n");
        in_set[c] = true;
        chosen.push(c);
        for j in 0..k {
            totals[j] += counts[c][j];
        }
    }

    let mut current = mix_divergence(&totals, target);
    let max_swaps = 10 * n;
    let mut swaps = 0;
    'passes: loop {
        let mut improved = false;
        for slot in 0..chosen.len() {
            for &c in order {
                if in_set[c] {
                    continue;
                }
                let out = chosen[slot];
                for j in 0..k {
                    scratch[j] = totals[j] - counts[out][j] + counts[c][j];
                }
                let d = mix_divergence(&scratch, target);
                if d < current - SWAP_EPSILON {
                    in_set[out] = false;
                    in_set[c] = true;
                    chosen[slot] = c;
                    totals.copy_from_slice(&scratch);
                    current = d;
                    improved = true;
                    swaps += 1;
                    if swaps >= max_swaps {
                        break 'passes;
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }

    if current > SWAP_EPSILON {
        if let Some((exact, d)) = exact_counts(counts, target, n, order, EXACT_STATE_BUDGET) {
            if d < current - SWAP_EPSILON {
                return (exact, d);
            }
        }
    }
    (chosen, current)
}

/// Optimal selection by enumerating reachable class totals layer by layer.
///
/// `layers[j]` maps each total reachable with `j` images to the first image
/// (in `order`) that produced it; that image's predecessor total was reached
/// strictly earlier, which makes the back-walk well defined. Returns `None`
/// once more than `budget` states exist.
fn exact_counts(
    counts: &[Vec<u64>],
    target: &[f64],
    n: usize,
    order: &[usize],
    budget: usize,
) -> Option<(Vec<usize>, f64)> {
    let k = target.len();
    let mut layers: Vec<IndexMap<Vec<u64>, usize>> = vec![IndexMap::new(); n + 1];
    layers[0].insert(vec![0; k], usize::MAX);
    let mut states = 1usize;
    let mut next = vec![0u64; k];
    for (pos, &img) in order.iter().enumerate() {
        let remaining = order.len() - pos;
        let lo = n.saturating_sub(remaining);
        for j in (lo..n.min(pos + 1)).rev() {
            let (below, above) = layers.split_at_mut(j + 1);
            for totals in below[j].keys() {
                for ((s, a), b) in next.iter_mut().zip(totals).zip(&counts[img]) {
                    *s = a + b;
                }
                if !above[0].contains_key(next.as_slice()) {
                    above[0].insert(next.clone(), img);
                    states += 1;
                    if states > budget {
                        return None;
                    }
                }
            }
        }
    }
    let mut best: Option<(&Vec<u64>, f64)> = None;
    for totals in layers[n].keys() {
        let d = mix_divergence(totals, target);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((totals, d));
        }
    }
    let (totals, d) = best?;
    let mut totals = totals.clone();
    let mut chosen = Vec::with_capacity(n);
    for j in (1..=n).rev() {
        let img = layers[j][&totals];
        chosen.push(img);
        for (t, c) in totals.iter_mut().zip(&counts[img]) {
            *t -= c;
        }
    }
    Some((chosen, d))
}

pub fn stratify_select(
    pool: &[ImageId],
    universe: &EvaluationUniverse,
    condition: &Condition,
    target: &ClassDistribution,
    params: SelectParams,
) -> Result<StratifiedTestSet, StratifyError> {
    if params.n == 0 {
        return Err(StratifyError::InvalidParams("n must be at least 1".into()));
    }
    if !(params.tolerance >= 0.0) {
        return Err(StratifyError::InvalidParams(format!(
            "tolerance must be non-negative, got {}",
            params.tolerance
        )));
    }
    let mut seen = HashSet::new();
    for id in pool {
        if universe.image(id).is_none() {
            return Err(StratifyError::UnknownImage(id.clone()));
        }
        if !seen.insert(id) {
            return Err(StratifyError::InvalidParams(format!("image {id} repeated in pool")));
        }
    }
    if pool.len() < params.n {
        return Err(StratifyError::PoolTooSmall {
            condition: condition.name.clone(),
            available: pool.len(),
            requested: params.n,
        });
    }
    let classes: Vec<u32> = universe.dataset.classes.iter().map(|c| c.id).collect();
    let target_classes: Vec<u32> = target.classes().collect();
    let mut sorted_classes = classes.clone();
    sorted_classes.sort_unstable();
    if sorted_classes != target_classes {
        return Err(CoreError::ClassUniverseMismatch {
            left: sorted_classes,
            right: target_classes,
        }
        .into());
    }
    let target_vec: Vec<f64> = target.iter().map(|(_, p)| p).collect();
    let counts: Vec<Vec<u64>> = pool
        .iter()
        .map(|id| universe.class_counts(id).into_values().collect())
        .collect();

    let mut order: Vec<usize> = (0..pool.len()).collect();
    substream(params.seed, DOMAIN_STRATIFY, 0).shuffle(&mut order);
    let (mut chosen, _) = select_counts(&counts, &target_vec, params.n, &order);
    chosen.sort_unstable();

    let mut totals: BTreeMap<u32, u64> = target.classes().map(|c| (c, 0)).collect();
    for &i in &chosen {
        for (c, n) in universe.class_counts(&pool[i]) {
            *totals.entry(c).or_default() += n;
        }
    }
    let achieved = ClassDistribution::from_counts(&totals).map_err(|_| StratifyError::NoInstances {
        condition: condition.name.clone(),
    })?;
    let divergence = distribution_divergence(&achieved, target)?;
    let set = StratifiedTestSet {
        condition: condition.clone(),
        seed: params.seed,
        tolerance: params.tolerance,
        image_ids: chosen.into_iter().map(|i| pool[i].clone()).collect(),
        achieved,
        target: target.clone(),
        divergence,
    };
    if divergence > params.tolerance {
        return Err(StratifyError::ToleranceUnmet {
            condition: condition.name.clone(),
            divergence,
            tolerance: params.tolerance,
            best: Box::new(set),
        });
    }
    Ok(set)
}

/// One test set per condition, in condition order.
///
/// With `disjoint`, conditions are filled in order and each removes its
/// images from the pools of the ones after it.
pub fn build_study_sets(
    universe: &EvaluationUniverse,
    conditions: &[Condition],
    target: &ClassDistribution,
    params: SelectParams,
    disjoint: bool,
) -> Result<Vec<StratifiedTestSet>, StratifyError> {
    if conditions.is_empty() {
        return Err(StratifyError::InvalidParams("no conditions".into()));
    }
    let mut names = HashSet::new();
    for c in conditions {
        c.validate()?;
        if !names.insert(c.name.as_str()) {
            return Err(StratifyError::DuplicateCondition(c.name.clone()));
        }
    }
    if disjoint {
        let mut used: HashSet<ImageId> = HashSet::new();
        let mut sets = Vec::with_capacity(conditions.len());
        for c in conditions {
            let pool: Vec<ImageId> = eligible_pool(universe, c)
                .into_iter()
                .filter(|id| !used.contains(id))
                .collect();
            let set = stratify_select(&pool, universe, c, target, params)?;
            used.extend(set.image_ids.iter().cloned());
            sets.push(set);
        }
        Ok(sets)
    } else {
        conditions
            .par_iter()
            .map(|c| stratify_select(&eligible_pool(universe, c), universe, c, target, params))
            .collect()
    }
}
