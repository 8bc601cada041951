//! Study configuration file (TOML).
//!
//! ```toml
//! schema_version = 1
//!
//! [paths]                      # relative to this file
//! annotations = "annotations.json"
//! predictions = "predictions.json"
//! tags = "tags.csv"
//! training_annotations = "train.json"   # optional; target class mix
//! out_dir = "out"                       # optional
//!
//! [study]
//! n = 43
//! seed = 7
//!
//! [[conditions]]
//! name = "Baseline"
//! baseline = true
//! forbidden = ["person", "building"]
//! ```
//!
//! `[synth]` and `[detector]` tables configure the `synth` subcommand. Their
//! `seed` keys may be left out, in which case they use `study.seed`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ctxprobe::impact::{Correction, DecisionMode, DEFAULT_ALPHA, DEFAULT_PERMUTATION_ROUNDS, DEFAULT_REPLICATES};
use ctxprobe::stratify::{Condition, DEFAULT_TOLERANCE};
use ctxprobe::synth::{MockDetectorConfig, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub annotations: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub tags: Option<PathBuf>,
    pub training_annotations: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyOptions {
    /// Images per test set.
    pub n: Option<usize>,
    pub seed: u64,
    pub iou_threshold: f64,
    pub confidence_floor: Option<f64>,
    pub tolerance: f64,
    pub disjoint: bool,
    pub replicates: usize,
    pub permutation_rounds: usize,
    pub alpha: f64,
    pub decision: DecisionMode,
    pub decision_threshold: f64,
    pub correction: Correction,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            n: None,
            seed: 0,
            iou_threshold: ctxprobe::eval::DEFAULT_IOU_THRESHOLD,
            confidence_floor: None,
            tolerance: DEFAULT_TOLERANCE,
            disjoint: false,
            replicates: DEFAULT_REPLICATES,
            permutation_rounds: DEFAULT_PERMUTATION_ROUNDS,
            alpha: DEFAULT_ALPHA,
            decision: DecisionMode::Sign,
            decision_threshold: 0.0,
            correction: Correction::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportOptions {
    pub object_noun: String,
    pub notes: Vec<String>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            object_noun: "objects".into(),
            notes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub name: String,
    #[serde(default)]
    pub baseline: bool,
    #[serde(default)]
    pub required: Vec<String>,
    #[serde(default)]
    pub forbidden: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub study: StudyOptions,
    #[serde(default)]
    pub report: ReportOptions,
    #[serde(default)]
    pub conditions: Vec<ConditionSpec>,
    pub synth: Option<SynthConfig>,
    pub detector: Option<MockDetectorConfig>,
    #[serde(skip)]
    synth_seed_given: bool,
    #[serde(skip)]
    detector_seed_given: bool,
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl StudyConfig {
    /// Parses a config document. Relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, CliError> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| config_error(e.to_string()))?;
        let has_seed = |table: &str| {
            raw.get(table)
                .and_then(|t| t.as_table())
                .is_some_and(|t| t.contains_key("seed"))
        };
        let mut config: StudyConfig = toml::from_str(text).map_err(|e| config_error(e.to_string()))?;
        if config.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(config_error(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                config.schema_version
            )));
        }
        config.synth_seed_given = has_seed("synth");
        config.detector_seed_given = has_seed("detector");
        let p = &mut config.paths;
        for path in [
            &mut p.annotations,
            &mut p.predictions,
            &mut p.tags,
            &mut p.training_annotations,
            &mut p.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_toml(&text, base).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn synth_config(&self) -> Result<SynthConfig, CliError> {
        let mut s = self
            .synth
            .clone()
            .ok_or_else(|| config_error("the synth subcommand needs a [synth] table"))?;
        if !self.synth_seed_given {
            s.seed = self.study.seed;
        }
        Ok(s)
    }

    pub fn detector_config(&self) -> Result<MockDetectorConfig, CliError> {
        let mut d = self
            .detector
            .clone()
            .ok_or_else(|| config_error("the synth subcommand needs a [detector] table"))?;
        if !self.detector_seed_given {
            d.seed = self.study.seed;
        }
        Ok(d)
    }

    /// Applies `--seed`; an explicit seed on the command line also replaces
    /// the seeds of the synth and detector tables.
    pub fn override_seed(&mut self, seed: u64) {
        self.study.seed = seed;
        self.synth_seed_given = false;
        self.detector_seed_given = false;
    }

    /// Conditions in config order and the index of the baseline.
    pub fn conditions(&self) -> Result<(Vec<Condition>, usize), CliError> {
        if self.conditions.is_empty() {
            return Err(config_error("no [[conditions]] defined"));
        }
        let baselines: Vec<usize> = (0..self.conditions.len())
            .filter(|&i| self.conditions[i].baseline)
            .collect();
        if baselines.len() != 1 {
            return Err(config_error(format!(
                "exactly one condition must set baseline = true, found {}",
                baselines.len()
            )));
        }
        let mut names = BTreeSet::new();
        let mut slugs = BTreeSet::new();
        let mut out = Vec::new();
        for c in &self.conditions {
            let cond = Condition::new(c.name.trim(), &c.required, &c.forbidden)
                .map_err(|e| config_error(e.to_string()))?;
            cond.validate().map_err(|e| config_error(e.to_string()))?;
            if !names.insert(cond.name.clone()) {
                return Err(config_error(format!("duplicate condition name {:?}", cond.name)));
            }
            let slug = slug(&cond.name);
            if slug.is_empty() || !slugs.insert(slug.clone()) {
                return Err(config_error(format!(
                    "condition name {:?} does not give a unique file name",
                    cond.name
                )));
            }
            out.push(cond);
        }
        Ok((out, baselines[0]))
    }

    pub fn validate_study(&self) -> Result<(), CliError> {
        let s = &self.study;
        if !(s.iou_threshold > 0.0 && s.iou_threshold <= 1.0) {
            return Err(config_error(format!("iou_threshold {} not in (0, 1]", s.iou_threshold)));
        }
        if let Some(f) = s.confidence_floor {
            if !(0.0..=1.0).contains(&f) {
                return Err(config_error(format!("confidence_floor {f} not in [0, 1]")));
            }
        }
        if !(s.tolerance >= 0.0 && s.tolerance <= 2.0) {
            return Err(config_error(format!("tolerance {} not in [0, 2]", s.tolerance)));
        }
        if s.replicates == 0 || s.permutation_rounds == 0 {
            return Err(config_error("replicates and permutation_rounds must be at least 1"));
        }
        if !(s.alpha > 0.0 && s.alpha < 1.0) {
            return Err(config_error(format!("alpha {} not in (0, 1)", s.alpha)));
        }
        if !s.decision_threshold.is_finite() {
            return Err(config_error("decision_threshold must be finite"));
        }
        if s.n == Some(0) {
            return Err(config_error("n must be at least 1"));
        }
        Ok(())
    }

    /// A required input path, which must exist.
    pub fn input(&self, which: &str) -> Result<&Path, CliError> {
        let p = match which {
            "annotations" => &self.paths.annotations,
            "predictions" => &self.paths.predictions,
            "tags" => &self.paths.tags,
            _ => unreachable!("unknown path key {which}"),
        };
        let p = p
            .as_deref()
            .ok_or_else(|| config_error(format!("[paths] {which} is not set")))?;
        if !p.is_file() {
            return Err(config_error(format!("{which} file {} does not exist", p.display())));
        }
        Ok(p)
    }
}

/// File-name form of a condition name: lowercase ASCII letters and digits,
/// other runs of characters replaced by a single `-`.
pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for ch in name.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if !out.is_empty() && !out.ends_with('-') {
            out.push('-');
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    out
}
