//! Baseline comparison, resampling statistics, and report rendering.
//!
//! A condition contributes when its accuracy exceeds the baseline's by more
//! than the decision threshold. In significance mode the permutation p-value
//! against the baseline must also be at most [`SIGNIFICANCE_LEVEL`].
//!
//! Both resampling procedures treat the image as the unit. Replicate `r` of
//! the accuracy bootstrap draws from `substream(seed, DOMAIN_BOOTSTRAP, r)`,
//! the difference bootstrap from `DOMAIN_BOOTSTRAP_DELTA` (baseline images
//! first, then condition images), and permutation round `r` from
//! `DOMAIN_PERMUTATION`. Percentiles use the nearest-rank rule.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{confusion_summary, ConditionMetrics, ConfusionRow};
use crate::rng::{substream, DOMAIN_BOOTSTRAP, DOMAIN_BOOTSTRAP_DELTA, DOMAIN_PERMUTATION};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_REPLICATES: usize = 2000;
pub const DEFAULT_PERMUTATION_ROUNDS: usize = 2000;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
/// Slack when comparing a permuted difference with the observed one, so
/// that equal sums computed in a different order still count as ties.
const PERMUTATION_TIE_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ImpactError {
    #[error("condition name {0:?} appears more than once")]
    DuplicateConditionName(String),
    #[error("baseline {0:?} has no ground-truth instances")]
    EmptyBaseline(String),
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("no statistics input for condition {0:?}")]
    MissingCondition(String),
    #[error("malformed report: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contributes {
    Yes,
    No,
    Baseline,
}

impl Contributes {
    pub fn label(self) -> &'static str {
        match self {
            Contributes::Yes => "Yes",
            Contributes::No => "No",
            Contributes::Baseline => "N/A",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionMode {
    #[default]
    Sign,
    Significance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correction {
    #[default]
    None,
    Bonferroni,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// Condition minus baseline, for each error rate per ground-truth object.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfusionDelta {
    pub duplicate_rate: f64,
    pub misclassified_rate: f64,
    pub confused_rate: f64,
    pub false_positive_rate: f64,
    pub missed_rate: f64,
}

impl ConfusionDelta {
    fn between(base: &ConfusionRow, cond: &ConfusionRow) -> Self {
        Self {
            duplicate_rate: cond.duplicate_rate - base.duplicate_rate,
            misclassified_rate: cond.misclassified_rate - base.misclassified_rate,
            confused_rate: cond.confused_rate - base.confused_rate,
            false_positive_rate: cond.false_positive_rate - base.false_positive_rate,
            missed_rate: cond.missed_rate - base.missed_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionImpact {
    pub condition: String,
    pub correct: u64,
    pub total_gt: u64,
    pub accuracy: f64,
    pub delta: f64,
    /// `delta / baseline accuracy`; absent when the baseline accuracy is 0.
    pub relative_change: Option<f64>,
    pub contributes: Contributes,
    pub contributes_by_sign: Contributes,
    pub contributes_by_significance: Option<Contributes>,
    pub accuracy_ci: Option<Interval>,
    pub delta_ci: Option<Interval>,
    pub p_value: Option<f64>,
    /// p-value after the multiple-comparison correction, when one is set.
    pub p_adjusted: Option<f64>,
    pub confidence_delta: f64,
    pub confusion_delta: ConfusionDelta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyMetadata {
    pub seed: u64,
    pub iou_threshold: f64,
    pub confidence_floor: Option<f64>,
    pub tolerance: Option<f64>,
    pub decision_mode: DecisionMode,
    pub decision_threshold: f64,
    pub alpha: f64,
    pub replicates: usize,
    pub permutation_rounds: usize,
    pub correction: Correction,
    /// Plural noun for the objects being detected, used in the table row
    /// "Number of <noun> to detect".
    pub object_noun: String,
    pub notes: Vec<String>,
    /// Input name to SHA-256 digest.
    pub digests: BTreeMap<String, String>,
}

impl Default for StudyMetadata {
    fn default() -> Self {
        Self {
            seed: 0,
            iou_threshold: crate::eval::DEFAULT_IOU_THRESHOLD,
            confidence_floor: None,
            tolerance: None,
            decision_mode: DecisionMode::Sign,
            decision_threshold: 0.0,
            alpha: DEFAULT_ALPHA,
            replicates: 0,
            permutation_rounds: 0,
            correction: Correction::None,
            object_noun: "objects".into(),
            notes: Vec::new(),
            digests: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactReport {
    pub schema_version: u32,
    pub metadata: StudyMetadata,
    pub baseline: ConditionMetrics,
    /// Baseline row first, then the other conditions in input order.
    pub conditions: Vec<ConditionImpact>,
    pub warnings: Vec<String>,
}

impl ImpactReport {
    pub fn validate(&self) -> Result<(), ImpactError> {
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(ImpactError::Malformed(format!(
                "schema_version {} (expected {REPORT_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let baselines: Vec<_> = self
            .conditions
            .iter()
            .filter(|c| c.contributes == Contributes::Baseline)
            .collect();
        if baselines.len() != 1 || self.conditions[0].contributes != Contributes::Baseline {
            return Err(ImpactError::Malformed(format!(
                "expected exactly one baseline row in first position, found {}",
                baselines.len()
            )));
        }
        if baselines[0].condition != self.baseline.condition {
            return Err(ImpactError::Malformed("baseline row does not match baseline metrics".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &self.conditions {
            if !seen.insert(c.condition.as_str()) {
                return Err(ImpactError::DuplicateConditionName(c.condition.clone()));
            }
        }
        Ok(())
    }

    pub fn row(&self, condition: &str) -> Option<&ConditionImpact> {
        self.conditions.iter().find(|c| c.condition == condition)
    }
}

fn sign_decision(delta: f64, threshold: f64) -> Contributes {
    if delta > threshold {
        Contributes::Yes
    } else {
        Contributes::No
    }
}

/// Deltas and sign-mode flags only. Statistics are added by [`attach_statistics`].
pub fn compare_conditions(
    baseline: &ConditionMetrics,
    others: &[ConditionMetrics],
    decision_threshold: f64,
) -> Result<ImpactReport, ImpactError> {
    if baseline.total_gt == 0 {
        return Err(ImpactError::EmptyBaseline(baseline.condition.clone()));
    }
    if !decision_threshold.is_finite() {
        return Err(ImpactError::InvalidParams(format!(
            "decision threshold {decision_threshold}"
        )));
    }
    let mut seen = BTreeSet::from([baseline.condition.as_str()]);
    for m in others {
        if !seen.insert(m.condition.as_str()) {
            return Err(ImpactError::DuplicateConditionName(m.condition.clone()));
        }
    }

    let rows = confusion_summary(std::slice::from_ref(baseline));
    let base_rates = &rows[0];
    let row = |m: &ConditionMetrics, is_baseline: bool| {
        let accuracy = m.correct as f64 / m.total_gt.max(1) as f64;
        let delta = if is_baseline { 0.0 } else { accuracy - baseline.accuracy };
        let contributes = if is_baseline {
            Contributes::Baseline
        } else {
            sign_decision(delta, decision_threshold)
        };
        ConditionImpact {
            condition: m.condition.clone(),
            correct: m.correct,
            total_gt: m.total_gt,
            accuracy,
            delta,
            relative_change: (baseline.accuracy > 0.0).then(|| delta / baseline.accuracy),
            contributes,
            contributes_by_sign: contributes,
            contributes_by_significance: None,
            accuracy_ci: None,
            delta_ci: None,
            p_value: None,
            p_adjusted: None,
            confidence_delta: m.mean_confidence_correct - baseline.mean_confidence_correct,
            confusion_delta: ConfusionDelta::between(
                base_rates,
                &confusion_summary(std::slice::from_ref(m))[0],
            ),
        }
    };
    let mut conditions = vec![row(baseline, true)];
    conditions.extend(others.iter().map(|m| row(m, false)));
    let mut base = baseline.clone();
    base.baseline = true;
    Ok(ImpactReport {
        schema_version: REPORT_SCHEMA_VERSION,
        metadata: StudyMetadata {
            decision_threshold,
            iou_threshold: baseline.iou_threshold,
            confidence_floor: baseline.confidence_floor,
            ..StudyMetadata::default()
        },
        baseline: base,
        conditions,
        warnings: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsParams {
    pub replicates: usize,
    pub permutation_rounds: usize,
    pub seed: u64,
    pub alpha: f64,
    pub mode: DecisionMode,
    pub correction: Correction,
}

impl Default for StatsParams {
    fn default() -> Self {
        Self {
            replicates: DEFAULT_REPLICATES,
            permutation_rounds: DEFAULT_PERMUTATION_ROUNDS,
            seed: 0,
            alpha: DEFAULT_ALPHA,
            mode: DecisionMode::Sign,
            correction: Correction::None,
        }
    }
}

/// Adds confidence intervals, p-values, and significance-mode flags. `others`
/// supplies the per-image counts of every non-baseline row.
pub fn attach_statistics(
    report: &mut ImpactReport,
    others: &[ConditionMetrics],
    params: StatsParams,
) -> Result<(), ImpactError> {
    let counts = |m: &ConditionMetrics| -> Vec<(u64, u64)> {
        m.per_image.iter().map(|i| (i.correct, i.total_gt)).collect()
    };
    let base = counts(&report.baseline);
    let comparisons = report.conditions.len() - 1;
    for row in report.conditions.iter_mut() {
        let mine = if row.contributes == Contributes::Baseline {
            base.clone()
        } else {
            let m = others
                .iter()
                .find(|m| m.condition == row.condition)
                .ok_or_else(|| ImpactError::MissingCondition(row.condition.clone()))?;
            counts(m)
        };
        row.accuracy_ci = Some(bootstrap_accuracy_ci(&mine, params.replicates, params.seed, params.alpha)?);
        if row.contributes == Contributes::Baseline {
            continue;
        }
        row.delta_ci = Some(bootstrap_delta_ci(&base, &mine, params.replicates, params.seed, params.alpha)?);
        let p = permutation_test(&mine, &base, params.permutation_rounds, params.seed)?;
        row.p_value = Some(p);
        let p_used = match params.correction {
            Correction::None => p,
            Correction::Bonferroni => {
                let adj = (p * comparisons as f64).min(1.0);
                row.p_adjusted = Some(adj);
                adj
            }
        };
        let by_significance = if row.contributes_by_sign == Contributes::Yes && p_used <= SIGNIFICANCE_LEVEL {
            Contributes::Yes
        } else {
            Contributes::No
        };
        row.contributes_by_significance = Some(by_significance);
        row.contributes = match params.mode {
            DecisionMode::Sign => row.contributes_by_sign,
            DecisionMode::Significance => by_significance,
        };
    }
    let md = &mut report.metadata;
    md.seed = params.seed;
    md.alpha = params.alpha;
    md.replicates = params.replicates;
    md.permutation_rounds = params.permutation_rounds;
    md.decision_mode = params.mode;
    md.correction = params.correction;
    Ok(())
}

fn check_stats_params(replicates: usize, alpha: f64) -> Result<(), ImpactError> {
    if replicates == 0 {
        return Err(ImpactError::InvalidParams("replicates must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ImpactError::InvalidParams(format!("alpha {alpha} not in (0, 1)")));
    }
    Ok(())
}

fn pooled_accuracy(counts: &[(u64, u64)]) -> Option<f64> {
    let (c, t) = counts.iter().fold((0, 0), |(c, t), &(ci, ti)| (c + ci, t + ti));
    (t > 0).then(|| c as f64 / t as f64)
}

fn check_counts(counts: &[(u64, u64)], what: &str) -> Result<(), ImpactError> {
    if counts.is_empty() {
        return Err(ImpactError::DegenerateSample(format!("{what}: no images")));
    }
    if counts.iter().any(|&(c, t)| c > t) {
        return Err(ImpactError::DegenerateSample(format!("{what}: correct exceeds total")));
    }
    if pooled_accuracy(counts).is_none() {
        return Err(ImpactError::DegenerateSample(format!("{what}: no ground truth")));
    }
    Ok(())
}

/// Value at nearest rank `ceil(p * n)` of an ascending slice.
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    // the epsilon keeps p * n from rounding just above an integer
    let rank = ((p * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

fn percentile_interval(mut values: Vec<f64>, alpha: f64) -> Result<Interval, ImpactError> {
    if values.is_empty() {
        return Err(ImpactError::DegenerateSample(
            "every bootstrap replicate had zero ground truth".into(),
        ));
    }
    values.sort_by(f64::total_cmp);
    Ok(Interval {
        lo: nearest_rank(&values, alpha / 2.0),
        hi: nearest_rank(&values, 1.0 - alpha / 2.0),
    })
}

fn resample(stream: &mut crate::rng::Stream, counts: &[(u64, u64)]) -> Option<f64> {
    let (mut c, mut t) = (0u64, 0u64);
    for _ in 0..counts.len() {
        let (ci, ti) = counts[stream.index(counts.len())];
        c += ci;
        t += ti;
    }
    (t > 0).then(|| c as f64 / t as f64)
}

/// Percentile bootstrap CI of pooled accuracy, resampling images. Replicates
/// that happen to draw no ground truth are dropped.
pub fn bootstrap_accuracy_ci(
    per_image: &[(u64, u64)],
    replicates: usize,
    seed: u64,
    alpha: f64,
) -> Result<Interval, ImpactError> {
    check_stats_params(replicates, alpha)?;
    check_counts(per_image, "bootstrap")?;
    let values: Vec<f64> = (0..replicates)
        .into_par_iter()
        .filter_map(|r| resample(&mut substream(seed, DOMAIN_BOOTSTRAP, r as u64), per_image))
        .collect();
    percentile_interval(values, alpha)
}

/// Percentile bootstrap CI of `accuracy(condition) - accuracy(baseline)`,
/// resampling each group's images independently.
pub fn bootstrap_delta_ci(
    baseline: &[(u64, u64)],
    condition: &[(u64, u64)],
    replicates: usize,
    seed: u64,
    alpha: f64,
) -> Result<Interval, ImpactError> {
    check_stats_params(replicates, alpha)?;
    check_counts(baseline, "baseline")?;
    check_counts(condition, "condition")?;
    let values: Vec<f64> = (0..replicates)
        .into_par_iter()
        .filter_map(|r| {
            let mut s = substream(seed, DOMAIN_BOOTSTRAP_DELTA, r as u64);
            let b = resample(&mut s, baseline)?;
            let c = resample(&mut s, condition)?;
            Some(c - b)
        })
        .collect();
    percentile_interval(values, alpha)
}

/// Two-sided permutation p-value for the pooled-accuracy difference, with
/// images relabelled between groups. Rounds where a relabelled group has no
/// ground truth count as at least as extreme as observed.
pub fn permutation_test(
    a: &[(u64, u64)],
    b: &[(u64, u64)],
    rounds: usize,
    seed: u64,
) -> Result<f64, ImpactError> {
    check_counts(a, "first group")?;
    check_counts(b, "second group")?;
    if rounds == 0 {
        return Err(ImpactError::InvalidParams("permutation rounds must be at least 1".into()));
    }
    let observed = (pooled_accuracy(a).unwrap() - pooled_accuracy(b).unwrap()).abs();
    let pooled: Vec<(u64, u64)> = a.iter().chain(b).copied().collect();
    let extreme = (0..rounds)
        .into_par_iter()
        .filter(|&r| {
            let mut labels = pooled.clone();
            substream(seed, DOMAIN_PERMUTATION, r as u64).shuffle(&mut labels);
            let (x, y) = labels.split_at(a.len());
            match (pooled_accuracy(x), pooled_accuracy(y)) {
                (Some(x), Some(y)) => (x - y).abs() >= observed - PERMUTATION_TIE_EPSILON,
                _ => true,
            }
        })
        .count();
    Ok((1 + extreme) as f64 / (1 + rounds) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

pub fn render_report(report: &ImpactReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s.into_bytes()
        }
        ReportFormat::Markdown => render_markdown(report).into_bytes(),
    }
}

pub fn percent(v: f64) -> String {
    format!("{:.2}%", v * 100.0)
}

fn points(v: f64) -> String {
    format!("{:+.2} pp", v * 100.0)
}

fn interval(i: Option<Interval>, fmt: fn(f64) -> String) -> String {
    i.map_or("-".into(), |i| format!("[{}, {}]", fmt(i.lo), fmt(i.hi)))
}

fn render_markdown(report: &ImpactReport) -> String {
    let md = &report.metadata;
    let rows = &report.conditions;
    let mut out = String::from("# Context impact report\n\n");
    let line = |out: &mut String, label: &str, cells: Vec<String>| {
        let _ = writeln!(out, "| {label} | {} |", cells.join(" | "));
    };
    line(&mut out, "", rows.iter().map(|r| r.condition.clone()).collect());
    let _ = writeln!(out, "|---|{}", "---|".repeat(rows.len()));
    line(&mut out, "Number of correct detections", rows.iter().map(|r| r.correct.to_string()).collect());
    line(
        &mut out,
        &format!("Number of {} to detect", md.object_noun),
        rows.iter().map(|r| r.total_gt.to_string()).collect(),
    );
    line(&mut out, "Accuracy", rows.iter().map(|r| percent(r.accuracy)).collect());
    line(&mut out, "Contributes to detection?", rows.iter().map(|r| r.contributes.label().to_string()).collect());

    let stats = rows.iter().any(|r| r.accuracy_ci.is_some());
    let pct = (1.0 - md.alpha) * 100.0;
    let other = |r: &ConditionImpact, f: &dyn Fn(&ConditionImpact) -> String| {
        if r.contributes == Contributes::Baseline {
            "-".to_string()
        } else {
            f(r)
        }
    };
    line(&mut out, "Accuracy change", rows.iter().map(|r| other(r, &|r| points(r.delta))).collect());
    if stats {
        line(
            &mut out,
            &format!("Accuracy {pct:.0}% CI"),
            rows.iter().map(|r| interval(r.accuracy_ci, percent)).collect(),
        );
        line(
            &mut out,
            &format!("Change {pct:.0}% CI"),
            rows.iter().map(|r| other(r, &|r| interval(r.delta_ci, points))).collect(),
        );
        line(
            &mut out,
            "p-value",
            rows.iter()
                .map(|r| other(r, &|r| r.p_value.map_or("-".into(), |p| format!("{p:.4}"))))
                .collect(),
        );
        if md.correction == Correction::Bonferroni {
            line(
                &mut out,
                "p-value (Bonferroni)",
                rows.iter()
                    .map(|r| other(r, &|r| r.p_adjusted.map_or("-".into(), |p| format!("{p:.4}"))))
                    .collect(),
            );
        }
        let alt = match md.decision_mode {
            DecisionMode::Sign => "Contributes (significance)",
            DecisionMode::Significance => "Contributes (sign)",
        };
        line(
            &mut out,
            alt,
            rows.iter()
                .map(|r| match md.decision_mode {
                    DecisionMode::Sign => r.contributes_by_significance.unwrap_or(r.contributes).label(),
                    DecisionMode::Significance => r.contributes_by_sign.label(),
                })
                .map(str::to_string)
                .collect(),
        );
    }

    if !md.notes.is_empty() {
        out.push('\n');
        for (i, n) in md.notes.iter().enumerate() {
            let _ = writeln!(out, "[{}] {n}", i + 1);
        }
    }

    out.push_str("\n## Study\n\n");
    let mode = match md.decision_mode {
        DecisionMode::Sign => "sign",
        DecisionMode::Significance => "significance",
    };
    let _ = writeln!(out, "- decision: {mode}, threshold {}", md.decision_threshold);
    let _ = writeln!(out, "- IoU threshold: {}", md.iou_threshold);
    if let Some(f) = md.confidence_floor {
        let _ = writeln!(out, "- confidence floor: {f}");
    }
    if let Some(t) = md.tolerance {
        let _ = writeln!(out, "- stratification tolerance: {t}");
    }
    let _ = writeln!(out, "- seed: {}", md.seed);
    if stats {
        let _ = writeln!(
            out,
            "- bootstrap replicates: {}, permutation rounds: {}, alpha: {}",
            md.replicates, md.permutation_rounds, md.alpha
        );
    }
    for (name, digest) in &md.digests {
        let _ = writeln!(out, "- {name}: sha256 {digest}");
    }
    if !report.warnings.is_empty() {
        out.push_str("\n## Warnings\n\n");
        for w in &report.warnings {
            let _ = writeln!(out, "- {w}");
        }
    }
    out
}

/// One row per condition, for external plotting.
pub fn render_csv(report: &ImpactReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "condition", "correct", "total_gt", "accuracy", "delta", "contributes", "accuracy_ci_lo",
        "accuracy_ci_hi", "delta_ci_lo", "delta_ci_hi", "p_value", "confidence_delta",
    ])
    .expect("csv write");
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for r in &report.conditions {
        w.write_record([
            r.condition.clone(),
            r.correct.to_string(),
            r.total_gt.to_string(),
            r.accuracy.to_string(),
            r.delta.to_string(),
            r.contributes.label().to_string(),
            opt(r.accuracy_ci.map(|i| i.lo)),
            opt(r.accuracy_ci.map(|i| i.hi)),
            opt(r.delta_ci.map(|i| i.lo)),
            opt(r.delta_ci.map(|i| i.hi)),
            opt(r.p_value),
            r.confidence_delta.to_string(),
        ])
        .expect("csv write");
    }
    w.into_inner().expect("csv flush")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ImageCounts;
    use crate::types::ImageId;
    use rand_chacha::ChaCha8Rng;
    use rand_core::{RngCore, SeedableRng};

    fn metrics(name: &str, per_image: &[(u64, u64)]) -> ConditionMetrics {
        let counts = per_image
            .iter()
            .enumerate()
            .map(|(i, &(correct, total_gt))| ImageCounts {
                image_id: ImageId::from(i as u64),
                correct,
                total_gt,
            })
            .collect();
        ConditionMetrics::from_image_counts(name, counts).unwrap()
    }

    /// `correct` of `total` objects spread one per image.
    fn spread(correct: u64, total: u64) -> Vec<(u64, u64)> {
        (0..total).map(|i| ((i < correct) as u64, 1)).collect()
    }

    fn table1() -> (ConditionMetrics, Vec<ConditionMetrics>) {
        (
            metrics("Baseline", &spread(34, 54)),
            vec![
                metrics("People", &spread(25, 45)),
                metrics("Buildings", &spread(40, 48)),
                metrics("People and buildings", &spread(38, 58)),
            ],
        )
    }

    #[test]
    fn table1_flags_and_deltas() {
        let (base, others) = table1();
        let r = compare_conditions(&base, &others, 0.0).unwrap();
        r.validate().unwrap();
        let flags: Vec<_> = r.conditions.iter().map(|c| c.contributes.label()).collect();
        assert_eq!(flags, ["N/A", "No", "Yes", "Yes"]);
        // 40/48 - 34/54 = 0.20370..., 25/45 - 34/54 = -0.07407...
        assert!((r.conditions[2].delta - (40.0 / 48.0 - 34.0 / 54.0)).abs() < 1e-15);
        assert!((r.conditions[2].delta - 0.2037).abs() < 5e-5);
        assert!((r.conditions[1].delta + 0.0741).abs() < 5e-5);
        assert_eq!(r.conditions[0].delta, 0.0);
        let rel = r.conditions[2].relative_change.unwrap();
        assert!((rel - r.conditions[2].delta / (34.0 / 54.0)).abs() < 1e-15);
    }

    #[test]
    fn equal_to_baseline_does_not_contribute() {
        let base = metrics("a", &spread(5, 10));
        let r = compare_conditions(&base, &[metrics("b", &spread(5, 10))], 0.0).unwrap();
        assert_eq!(r.conditions[1].delta, 0.0);
        assert_eq!(r.conditions[1].contributes, Contributes::No);
    }

    #[test]
    fn duplicate_names_rejected() {
        let base = metrics("a", &spread(5, 10));
        let err = compare_conditions(&base, &[metrics("a", &spread(1, 2))], 0.0).unwrap_err();
        assert_eq!(err, ImpactError::DuplicateConditionName("a".into()));
        let err = compare_conditions(&base, &[metrics("b", &spread(1, 2)), metrics("b", &spread(1, 2))], 0.0)
            .unwrap_err();
        assert_eq!(err, ImpactError::DuplicateConditionName("b".into()));
    }

    #[test]
    fn constant_sample_collapses_ci() {
        let ci = bootstrap_accuracy_ci(&[(3, 4); 12], 200, 9, 0.05).unwrap();
        assert_eq!((ci.lo, ci.hi), (0.75, 0.75));
    }

    /// Draws reproduced from the generator definition: ChaCha8 keyed by
    /// `seed ^ domain` on stream `r`, and for two choices Lemire's rule never
    /// rejects and reduces to the top bit of each 64-bit output.
    #[test]
    fn two_image_bootstrap_matches_hand_enumeration() {
        let seed = 7;
        let images = [(1u64, 1u64), (0, 1)];
        let mut oracle = Vec::new();
        for r in 0..4u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x424f_4f54_5354_5250);
            rng.set_stream(r);
            let picks = [rng.next_u64() >> 63, rng.next_u64() >> 63];
            let correct: u64 = picks.iter().map(|&i| images[i as usize].0).sum();
            oracle.push(correct as f64 / 2.0);
        }
        oracle.sort_by(f64::total_cmp);
        // nearest rank: ceil(0.025 * 4) = 1, ceil(0.975 * 4) = 4
        let ci = bootstrap_accuracy_ci(&images, 4, seed, 0.05).unwrap();
        assert_eq!((ci.lo, ci.hi), (oracle[0], oracle[3]));
        assert!([0.0, 0.5, 1.0].contains(&ci.lo) && [0.0, 0.5, 1.0].contains(&ci.hi));
        assert_eq!((ci.lo, ci.hi), (0.0, 1.0));
        assert_eq!(bootstrap_accuracy_ci(&images, 4, seed, 0.05).unwrap(), ci);
    }

    #[test]
    fn nearest_rank_rule() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.025), 1.0);
        assert_eq!(nearest_rank(&v, 0.3), 3.0);
        assert_eq!(nearest_rank(&v, 0.31), 4.0);
        assert_eq!(nearest_rank(&v, 0.975), 10.0);
    }

    #[test]
    fn bootstrap_rejects_degenerate_input() {
        assert!(matches!(
            bootstrap_accuracy_ci(&[(0, 0), (0, 0)], 10, 1, 0.05),
            Err(ImpactError::DegenerateSample(_))
        ));
        assert!(bootstrap_accuracy_ci(&[], 10, 1, 0.05).is_err());
        assert!(bootstrap_accuracy_ci(&[(1, 1)], 0, 1, 0.05).is_err());
        assert!(bootstrap_accuracy_ci(&[(1, 1)], 10, 1, 1.0).is_err());
    }

    #[test]
    fn identical_groups_give_p_one() {
        let a = [(1, 2), (3, 3), (0, 1), (2, 5)];
        assert_eq!(permutation_test(&a, &a, 500, 3).unwrap(), 1.0);
        let b = a;
        assert_eq!(permutation_test(&a, &b, 500, 3).unwrap(), 1.0);
    }

    #[test]
    fn separated_groups_give_small_p() {
        // only 2 of the C(20,10) = 184756 splits are as extreme as observed
        let p = permutation_test(&[(1, 1); 10], &[(0, 1); 10], 1000, 5).unwrap();
        assert!(p <= 0.01, "{p}");
        assert!(p >= 1.0 / 1001.0);
    }

    #[test]
    fn significance_mode_and_correction() {
        let (base, others) = table1();
        let mut r = compare_conditions(&base, &others, 0.0).unwrap();
        let params = StatsParams {
            replicates: 500,
            permutation_rounds: 500,
            seed: 1,
            mode: DecisionMode::Significance,
            ..StatsParams::default()
        };
        attach_statistics(&mut r, &others, params).unwrap();
        let both = r.row("People and buildings").unwrap();
        assert_eq!(both.contributes_by_sign, Contributes::Yes);
        assert!(both.p_value.unwrap() > SIGNIFICANCE_LEVEL);
        assert_eq!(both.contributes, Contributes::No);
        for row in &r.conditions {
            let ci = row.accuracy_ci.unwrap();
            assert!(0.0 <= ci.lo && ci.lo <= ci.hi && ci.hi <= 1.0);
        }

        let mut c = compare_conditions(&base, &others, 0.0).unwrap();
        attach_statistics(&mut c, &others, StatsParams { correction: Correction::Bonferroni, ..params }).unwrap();
        for (row, raw) in c.conditions.iter().zip(&r.conditions).skip(1) {
            assert_eq!(row.p_adjusted, Some((raw.p_value.unwrap() * 3.0).min(1.0)));
        }
    }

    #[test]
    fn markdown_table_shape() {
        let (base, others) = table1();
        let mut r = compare_conditions(&base, &others, 0.0).unwrap();
        r.metadata.object_noun = "vehicles".into();
        let md = String::from_utf8(render_report(&r, ReportFormat::Markdown)).unwrap();
        assert!(md.contains("| Number of correct detections | 34 | 25 | 40 | 38 |"));
        assert!(md.contains("| Number of vehicles to detect | 54 | 45 | 48 | 58 |"));
        assert!(md.contains("| Accuracy | 62.96% | 55.56% | 83.33% | 65.52% |"));
        assert!(md.contains("| Contributes to detection? | N/A | No | Yes | Yes |"));
    }

    #[test]
    fn baseline_only_table() {
        let r = compare_conditions(&metrics("base", &spread(1, 3)), &[], 0.0).unwrap();
        let md = String::from_utf8(render_report(&r, ReportFormat::Markdown)).unwrap();
        assert!(md.contains("| Accuracy | 33.33% |\n"));
        assert!(md.contains("| Contributes to detection? | N/A |\n"));
    }

    #[test]
    fn json_round_trip() {
        let (base, others) = table1();
        let mut r = compare_conditions(&base, &others, 0.0).unwrap();
        attach_statistics(&mut r, &others, StatsParams { replicates: 50, permutation_rounds: 50, ..Default::default() })
            .unwrap();
        let bytes = render_report(&r, ReportFormat::Json);
        let back: ImpactReport = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(back, r);
        assert_eq!(render_report(&back, ReportFormat::Markdown), render_report(&r, ReportFormat::Markdown));
    }
}
