//! Command-line driver: stratify, evaluate, compare, synth, and run.
//!
//! Output layout under the output directory:
//!
//! ```text
//! manifests/<condition>.json   test-set manifests
//! metrics/<condition>.json     per-condition metrics
//! audit.jsonl                  per-image match dump (--audit)
//! report.md, report.json       impact report
//! report.csv                   one row per condition (--emit-csv)
//! ```
//!
//! Exit codes: 0 success, 2 when a test set cannot be built within the pool
//! or tolerance, 3 for invalid configuration or input files, 1 otherwise.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ctxprobe::eval::{audit_lines, score_condition, ConditionMetrics, EvalError, EvalParams};
use ctxprobe::impact::{
    attach_statistics, compare_conditions, render_csv, render_report, DecisionMode, ImpactError, ImpactReport,
    ReportFormat, StatsParams,
};
use ctxprobe::ingest::{
    join, load_annotations, load_predictions, load_scene_tags, sha256_hex, EvaluationUniverse, IngestError,
    ParseOptions,
};
use ctxprobe::stratify::{build_study_sets, SelectParams, StratifiedTestSet, StratifyError};
use ctxprobe::synth::{mock_detect, render_files, synth_generate, SynthError};
use ctxprobe::types::{compute_class_distribution, ClassDistribution, CoreError};
use thiserror::Error;

pub use config::{slug, StudyConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Stratify(#[from] StratifyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Impact(#[from] ImpactError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Stratify(
                StratifyError::PoolTooSmall { .. }
                | StratifyError::ToleranceUnmet { .. }
                | StratifyError::NoInstances { .. },
            ) => 2,
            CliError::Io { .. } | CliError::Ingest(IngestError::Io { .. }) => 1,
            _ => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "ctxprobe", version, about = "Measure how scene-level context affects object-detector accuracy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// Study config file (TOML)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Accept unknown keys and repairable values in input files, with warnings
    #[arg(long, global = true)]
    pub lenient: bool,
    /// Write per-image match results to audit.jsonl
    #[arg(long, global = true)]
    pub audit: bool,
    /// Require p <= 0.05 for a condition to count as contributing
    #[arg(long, global = true)]
    pub significance: bool,
    /// Also write report.csv
    #[arg(long, global = true)]
    pub emit_csv: bool,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Images per test set
    #[arg(long, global = true)]
    pub n: Option<usize>,
    #[arg(long, global = true)]
    pub iou_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub tolerance: Option<f64>,
    #[arg(long, global = true)]
    pub replicates: Option<usize>,
    #[arg(long, global = true)]
    pub rounds: Option<usize>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Bonferroni-correct p-values across conditions
    #[arg(long, global = true)]
    pub bonferroni: bool,
    /// Keep test sets image-disjoint across conditions
    #[arg(long, global = true)]
    pub disjoint: bool,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Build one distribution-matched test set per condition
    Stratify,
    /// Score predictions on each manifest
    Evaluate {
        /// Directory holding the manifests (default: <out-dir>/manifests)
        #[arg(long)]
        manifests: Option<PathBuf>,
    },
    /// Compare metrics files against the baseline and write the report
    Compare {
        /// Metrics files (default: <out-dir>/metrics/<condition>.json for each configured condition)
        metrics: Vec<PathBuf>,
        /// Name of the baseline condition, overriding the metrics files' own flag
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Generate a synthetic dataset, scene tags, and mock-detector predictions
    Synth,
    /// stratify, evaluate, and compare in one go
    Run,
}

/// Parses arguments, runs the command, and returns the text for stdout.
pub fn run_cli(cli: Cli) -> Result<String, CliError> {
    match cli.global.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?
            .install(|| dispatch(&cli)),
        None => dispatch(&cli),
    }
}

fn dispatch(cli: &Cli) -> Result<String, CliError> {
    let ctx = Context::new(&cli.global)?;
    match &cli.command {
        Command::Stratify => cmd_stratify(&ctx).map(|(_, out)| out),
        Command::Evaluate { manifests } => cmd_evaluate(&ctx, manifests.as_deref()).map(|(_, out)| out),
        Command::Compare { metrics, baseline } => {
            cmd_compare(&ctx, metrics, baseline.as_deref()).map(|(_, out)| out)
        }
        Command::Synth => cmd_synth(&ctx),
        Command::Run => cmd_run(&ctx).map(|(_, out)| out),
    }
}

/// Config plus command-line overrides.
pub struct Context {
    pub config: StudyConfig,
    pub out_dir: PathBuf,
    pub lenient: bool,
    pub audit: bool,
    pub emit_csv: bool,
    has_config: bool,
}

impl Context {
    pub fn new(g: &GlobalArgs) -> Result<Self, CliError> {
        let (mut config, has_config) = match &g.config {
            Some(p) => (StudyConfig::load(p)?, true),
            None => (StudyConfig::from_toml("schema_version = 1", Path::new(""))?, false),
        };
        if let Some(s) = g.seed {
            config.override_seed(s);
        }
        let st = &mut config.study;
        if let Some(n) = g.n {
            st.n = Some(n);
        }
        if let Some(t) = g.iou_threshold {
            st.iou_threshold = t;
        }
        if let Some(t) = g.tolerance {
            st.tolerance = t;
        }
        if let Some(r) = g.replicates {
            st.replicates = r;
        }
        if let Some(r) = g.rounds {
            st.permutation_rounds = r;
        }
        if let Some(a) = g.alpha {
            st.alpha = a;
        }
        if g.significance {
            st.decision = DecisionMode::Significance;
        }
        if g.bonferroni {
            st.correction = ctxprobe::impact::Correction::Bonferroni;
        }
        if g.disjoint {
            st.disjoint = true;
        }
        config.validate_study()?;
        let out_dir = g
            .out_dir
            .clone()
            .or_else(|| config.paths.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("ctxprobe-out"));
        Ok(Self {
            config,
            out_dir,
            lenient: g.lenient,
            audit: g.audit,
            emit_csv: g.emit_csv,
            has_config,
        })
    }

    fn options(&self) -> ParseOptions {
        ParseOptions { lenient: self.lenient }
    }

    fn require_config(&self, what: &str) -> Result<(), CliError> {
        if self.has_config {
            Ok(())
        } else {
            Err(CliError::Config(format!("{what} needs --config")))
        }
    }

    fn load_universe(&self, with_predictions: bool) -> Result<(EvaluationUniverse, Vec<String>), CliError> {
        let annotations = self.config.input("annotations")?;
        let tags_path = self.config.input("tags")?;
        let predictions_path = if with_predictions {
            Some(self.config.input("predictions")?)
        } else {
            None
        };
        let (dataset, mut warnings) = load_annotations(annotations, self.options())?;
        let tags = load_scene_tags(tags_path)?;
        let predictions = match predictions_path {
            Some(p) => {
                let (set, w) = load_predictions(p, self.options())?;
                warnings.extend(w);
                Some(set)
            }
            None => None,
        };
        let universe = join(dataset, &tags, predictions.as_ref());
        warnings.extend(universe.warnings.iter().cloned());
        Ok((universe, warnings))
    }

    /// Class mix every test set is matched to: the training annotations when
    /// configured, otherwise the whole annotation file.
    fn target(&self, universe: &EvaluationUniverse) -> Result<ClassDistribution, CliError> {
        match &self.config.paths.training_annotations {
            Some(p) => {
                if !p.is_file() {
                    return Err(CliError::Config(format!(
                        "training_annotations file {} does not exist",
                        p.display()
                    )));
                }
                let (train, _) = load_annotations(p, self.options())?;
                Ok(compute_class_distribution(&train.ground_truth, &universe.dataset.classes)?)
            }
            None => Ok(compute_class_distribution(
                &universe.dataset.ground_truth,
                &universe.dataset.classes,
            )?),
        }
    }

    fn dir(&self, sub: &str) -> PathBuf {
        self.out_dir.join(sub)
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |source| CliError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, bytes).map_err(io)
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

pub fn cmd_stratify(ctx: &Context) -> Result<(Vec<StratifiedTestSet>, String), CliError> {
    ctx.require_config("stratify")?;
    let (conditions, _) = ctx.config.conditions()?;
    let n = ctx
        .config
        .study
        .n
        .ok_or_else(|| CliError::Config("[study] n is not set".into()))?;
    let (universe, warnings) = ctx.load_universe(false)?;
    warn_all(&warnings);
    let target = ctx.target(&universe)?;
    let params = SelectParams {
        n,
        seed: ctx.config.study.seed,
        tolerance: ctx.config.study.tolerance,
    };
    let sets = build_study_sets(&universe, &conditions, &target, params, ctx.config.study.disjoint)?;
    let mut out = String::new();
    for set in &sets {
        let path = ctx.dir("manifests").join(format!("{}.json", slug(&set.condition.name)));
        write(&path, set.to_manifest_json().as_bytes())?;
        let _ = writeln!(
            out,
            "{}: {} images, divergence {:.6} (tolerance {})",
            set.condition.name,
            set.image_ids.len(),
            set.divergence,
            set.tolerance
        );
    }
    Ok((sets, out))
}

pub fn cmd_evaluate(ctx: &Context, manifests: Option<&Path>) -> Result<(Vec<ConditionMetrics>, String), CliError> {
    ctx.require_config("evaluate")?;
    let (conditions, baseline) = ctx.config.conditions()?;
    let dir = manifests.map_or_else(|| ctx.dir("manifests"), Path::to_path_buf);
    let mut sets = Vec::new();
    for c in &conditions {
        let path = dir.join(format!("{}.json", slug(&c.name)));
        let bytes = read(&path)?;
        let set = StratifiedTestSet::from_manifest_json(&bytes)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if set.condition != *c {
            return Err(CliError::Config(format!(
                "{} was built for a different condition than {:?}",
                path.display(),
                c.name
            )));
        }
        sets.push((set, sha256_hex(&bytes)));
    }
    let (universe, warnings) = ctx.load_universe(true)?;
    warn_all(&warnings);
    let params = EvalParams {
        iou_threshold: ctx.config.study.iou_threshold,
        confidence_floor: ctx.config.study.confidence_floor,
    };
    let mut all = Vec::new();
    let mut audit = String::new();
    let mut out = String::new();
    for (i, (set, digest)) in sets.iter().enumerate() {
        let eval = score_condition(set, &universe, params)?;
        let mut m = eval.metrics;
        m.baseline = i == baseline;
        m.sources.manifest_sha256 = Some(digest.clone());
        let mut json = serde_json::to_string_pretty(&m).expect("metrics serialize");
        json.push('\n');
        write(&ctx.dir("metrics").join(format!("{}.json", slug(&m.condition))), json.as_bytes())?;
        audit.push_str(&audit_lines(&eval.matches));
        let _ = writeln!(
            out,
            "{}: {}/{} correct ({})",
            m.condition,
            m.correct,
            m.total_gt,
            ctxprobe::impact::percent(m.accuracy)
        );
        all.push(m);
    }
    if ctx.audit {
        write(&ctx.out_dir.join("audit.jsonl"), audit.as_bytes())?;
    }
    Ok((all, out))
}

fn load_metrics(ctx: &Context, files: &[PathBuf]) -> Result<Vec<ConditionMetrics>, CliError> {
    let paths: Vec<PathBuf> = if files.is_empty() {
        ctx.require_config("compare without metrics files")?;
        let (conditions, _) = ctx.config.conditions()?;
        conditions
            .iter()
            .map(|c| ctx.dir("metrics").join(format!("{}.json", slug(&c.name))))
            .collect()
    } else {
        files.to_vec()
    };
    paths
        .iter()
        .map(|p| {
            let m: ConditionMetrics = serde_json::from_slice(&read(p)?)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            m.check_consistency()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            Ok(m)
        })
        .collect()
}

pub fn cmd_compare(
    ctx: &Context,
    files: &[PathBuf],
    baseline: Option<&str>,
) -> Result<(ImpactReport, String), CliError> {
    let metrics = load_metrics(ctx, files)?;
    let config_baseline = if ctx.has_config && files.is_empty() {
        let (conditions, b) = ctx.config.conditions()?;
        Some(conditions[b].name.clone())
    } else {
        None
    };
    let wanted = baseline.map(str::to_string).or(config_baseline);
    let is_base = |m: &ConditionMetrics| match &wanted {
        Some(name) => m.condition == *name,
        None => m.baseline,
    };
    let bases: Vec<usize> = (0..metrics.len()).filter(|&i| is_base(&metrics[i])).collect();
    if bases.len() != 1 {
        return Err(CliError::Config(format!(
            "expected exactly one baseline among the metrics files, found {}",
            bases.len()
        )));
    }
    let base = &metrics[bases[0]];
    let others: Vec<ConditionMetrics> = metrics
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != bases[0])
        .map(|(_, m)| m.clone())
        .collect();

    let st = &ctx.config.study;
    let mut report = compare_conditions(base, &others, st.decision_threshold)?;
    attach_statistics(
        &mut report,
        &others,
        StatsParams {
            replicates: st.replicates,
            permutation_rounds: st.permutation_rounds,
            seed: st.seed,
            alpha: st.alpha,
            mode: st.decision,
            correction: st.correction,
        },
    )?;
    let md = &mut report.metadata;
    md.object_noun = ctx.config.report.object_noun.clone();
    md.notes = ctx.config.report.notes.clone();
    md.tolerance = ctx.has_config.then_some(st.tolerance);
    md.digests = digests(base, &metrics);
    for m in &others {
        if m.iou_threshold != base.iou_threshold || m.confidence_floor != base.confidence_floor {
            report.warnings.push(format!(
                "{:?} was scored with different matching settings than the baseline",
                m.condition
            ));
        }
    }
    for r in &report.conditions {
        if r.total_gt < 30 {
            report
                .warnings
                .push(format!("{:?} has only {} ground-truth objects", r.condition, r.total_gt));
        }
    }
    report.validate()?;

    let markdown = render_report(&report, ReportFormat::Markdown);
    write(&ctx.out_dir.join("report.md"), &markdown)?;
    write(&ctx.out_dir.join("report.json"), &render_report(&report, ReportFormat::Json))?;
    if ctx.emit_csv {
        write(&ctx.out_dir.join("report.csv"), &render_csv(&report))?;
    }
    Ok((report, String::from_utf8(markdown).expect("markdown is utf-8")))
}

fn digests(base: &ConditionMetrics, all: &[ConditionMetrics]) -> BTreeMap<String, String> {
    let mut d = BTreeMap::new();
    for (i, p) in base.sources.annotations.iter().enumerate() {
        let key = if i == 0 { "annotations".to_string() } else { format!("annotations[{i}]") };
        d.insert(key, p.sha256.clone());
    }
    if let Some(p) = &base.sources.predictions {
        d.insert("predictions".into(), p.sha256.clone());
    }
    if let Some(p) = &base.sources.tags {
        d.insert("tags".into(), p.sha256.clone());
    }
    for m in all {
        if let Some(h) = &m.sources.manifest_sha256 {
            d.insert(format!("manifest {}", m.condition), h.clone());
        }
    }
    d
}

/// Writes the annotation, prediction, and tag files to the configured input
/// paths, or to the output directory when a path is not set.
pub fn cmd_synth(ctx: &Context) -> Result<String, CliError> {
    ctx.require_config("synth")?;
    let synth = ctx.config.synth_config()?;
    let detector = ctx.config.detector_config()?;
    let (dataset, tags) = synth_generate(&synth)?;
    let predictions = mock_detect(&dataset, &tags, &detector)?;
    let files = render_files(&dataset, &tags, &predictions);
    let p = &ctx.config.paths;
    let target = |configured: &Option<PathBuf>, name: &str| {
        configured.clone().unwrap_or_else(|| ctx.out_dir.join(name))
    };
    let a = target(&p.annotations, "annotations.json");
    let pr = target(&p.predictions, "predictions.json");
    let t = target(&p.tags, "tags.csv");
    write(&a, &files.annotations)?;
    write(&pr, &files.predictions)?;
    write(&t, &files.tags)?;
    Ok(format!(
        "{} images, {} objects, {} detections\n{}\n{}\n{}\n",
        dataset.images.len(),
        dataset.ground_truth.len(),
        predictions.detections.len(),
        a.display(),
        pr.display(),
        t.display()
    ))
}

/// The three subcommands in sequence, with the same files written.
pub fn cmd_run(ctx: &Context) -> Result<(ImpactReport, String), CliError> {
    ctx.require_config("run")?;
    ctx.config.conditions()?;
    for which in ["annotations", "predictions", "tags"] {
        ctx.config.input(which)?;
    }
    let (_, strat) = cmd_stratify(ctx)?;
    let (_, eval) = cmd_evaluate(ctx, None)?;
    eprint!("{strat}{eval}");
    cmd_compare(ctx, &[], None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 3);
        let e = CliError::Stratify(StratifyError::PoolTooSmall {
            condition: "a".into(),
            available: 1,
            requested: 2,
        });
        assert_eq!(e.exit_code(), 2);
        let io = CliError::Io {
            path: "p".into(),
            source: std::io::Error::other("x"),
        };
        assert_eq!(io.exit_code(), 1);
        let parse = CliError::Ingest(IngestError::Parse {
            origin: "a".into(),
            message: "b".into(),
        });
        assert_eq!(parse.exit_code(), 3);
    }
}
