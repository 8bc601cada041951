use std::path::{Path, PathBuf};
use std::process::Command as Process;

use ctxprobe::impact::Contributes;
use ctxprobe::ingest::{parse_annotations_with, parse_predictions_with, parse_scene_tags, ParseOptions};
use ctxprobe_cli::{cmd_compare, cmd_evaluate, cmd_run, cmd_stratify, cmd_synth, Context, GlobalArgs};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/table1").join(name)
}

/// The fixture config with its paths made absolute, plus `extra` appended
/// to the `[study]` table, written to `dir/study.toml`.
fn config_in(dir: &Path, study_extra: &str) -> PathBuf {
    let text = std::fs::read_to_string(fixture("study.toml")).unwrap();
    let mut text = text.replace("[study]\n", &format!("[study]\n{study_extra}\n"));
    for f in ["annotations.json", "predictions.json", "tags.csv", "train.json"] {
        text = text.replace(&format!("\"{f}\""), &format!("{:?}", fixture(f).display().to_string()));
    }
    let path = dir.join("study.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn ctx(config: Option<PathBuf>, out: &Path, tweak: impl FnOnce(&mut GlobalArgs)) -> Context {
    let mut g = GlobalArgs {
        config,
        out_dir: Some(out.to_path_buf()),
        replicates: Some(500),
        rounds: Some(500),
        ..GlobalArgs::default()
    };
    tweak(&mut g);
    Context::new(&g).unwrap()
}

fn bin() -> Process {
    Process::new(env!("CARGO_BIN_EXE_ctxprobe"))
}

fn fixture_metrics() -> Vec<PathBuf> {
    ["baseline", "people", "buildings", "people-and-buildings"]
        .iter()
        .map(|n| fixture(&format!("metrics/{n}.json")))
        .collect()
}

#[test]
fn compare_reproduces_table_from_metrics_files() {
    let out = tempfile::tempdir().unwrap();
    let c = ctx(None, out.path(), |_| {});
    let (report, md) = cmd_compare(&c, &fixture_metrics(), None).unwrap();
    let acc: Vec<f64> = report.conditions.iter().map(|r| r.accuracy).collect();
    for (got, want) in acc.iter().zip([34.0 / 54.0, 25.0 / 45.0, 40.0 / 48.0, 38.0 / 58.0]) {
        assert!((got - want).abs() < 1e-12);
    }
    let flags: Vec<_> = report.conditions.iter().map(|r| r.contributes).collect();
    assert_eq!(flags, [Contributes::Baseline, Contributes::No, Contributes::Yes, Contributes::Yes]);
    assert!(md.contains("| Accuracy | 62.96% | 55.56% | 83.33% | 65.52% |"));
    assert!(out.path().join("report.json").is_file());
}

#[test]
fn run_reproduces_table_from_raw_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), "");
    let (_, md) = cmd_run(&ctx(Some(cfg), &dir.path().join("out"), |_| {})).unwrap();
    assert!(md.contains("| Number of correct detections | 34 | 25 | 40 | 38 |"));
    assert!(md.contains("| Number of vehicles to detect | 54 | 45 | 48 | 58 |"));
    assert!(md.contains("| Accuracy | 62.96% | 55.56% | 83.33% | 65.52% |"));
    assert!(md.contains("| Contributes to detection? | N/A | No | Yes | Yes |"));
    assert!(md.contains("63.00%"));
    for n in ["baseline", "people", "buildings", "people-and-buildings"] {
        let m = std::fs::read(dir.path().join(format!("out/manifests/{n}.json"))).unwrap();
        let set = ctxprobe::stratify::StratifiedTestSet::from_manifest_json(&m).unwrap();
        assert_eq!(set.image_ids.len(), 43);
    }
}

#[test]
fn significance_mode_drops_the_small_gain() {
    let out = tempfile::tempdir().unwrap();
    let c = ctx(None, out.path(), |g| g.significance = true);
    let (report, _) = cmd_compare(&c, &fixture_metrics(), None).unwrap();
    let both = report.row("People and buildings").unwrap();
    assert_eq!(both.contributes_by_sign, Contributes::Yes);
    assert!(both.p_value.unwrap() > 0.05);
    assert_eq!(both.contributes, Contributes::No);
    assert_eq!(report.row("Buildings").unwrap().contributes, Contributes::Yes);
}

#[test]
fn condition_equal_to_baseline_does_not_contribute() {
    let dir = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(&fixture_metrics()[0]).unwrap();
    let twin = base.replace("\"Baseline\"", "\"Twin\"").replace("\"baseline\": true", "\"baseline\": false");
    let twin_path = dir.path().join("twin.json");
    std::fs::write(&twin_path, twin).unwrap();
    let c = ctx(None, dir.path(), |_| {});
    let (report, _) = cmd_compare(&c, &[fixture_metrics()[0].clone(), twin_path], None).unwrap();
    let row = report.row("Twin").unwrap();
    assert_eq!(row.delta, 0.0);
    assert_eq!(row.contributes, Contributes::No);
    assert_eq!(row.p_value, Some(1.0));
}

#[test]
fn run_equals_the_three_steps_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), "");
    let read_all = |out: &Path| {
        let mut files = Vec::new();
        for sub in ["manifests", "metrics"] {
            let mut names: Vec<_> = std::fs::read_dir(out.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
            names.sort();
            files.extend(names.into_iter().map(|p| std::fs::read(p).unwrap()));
        }
        files.push(std::fs::read(out.join("report.json")).unwrap());
        files.push(std::fs::read(out.join("report.md")).unwrap());
        files
    };

    let a = dir.path().join("a");
    cmd_run(&ctx(Some(cfg.clone()), &a, |_| {})).unwrap();
    let b = dir.path().join("b");
    let cb = ctx(Some(cfg.clone()), &b, |_| {});
    cmd_stratify(&cb).unwrap();
    cmd_evaluate(&cb, None).unwrap();
    cmd_compare(&cb, &[], None).unwrap();
    let c = dir.path().join("c");
    cmd_run(&ctx(Some(cfg), &c, |g| g.threads = Some(1))).unwrap();
    assert_eq!(read_all(&a), read_all(&b));
    assert_eq!(read_all(&a), read_all(&c));
}

#[test]
fn single_condition_gives_one_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "schema_version = 1\n[paths]\nannotations = {:?}\ntags = {:?}\n[study]\nn = 10\n[[conditions]]\nname = \"all\"\nbaseline = true\n",
        fixture("annotations.json").display().to_string(),
        fixture("tags.csv").display().to_string()
    );
    let cfg = dir.path().join("one.toml");
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    let (sets, _) = cmd_stratify(&ctx(Some(cfg), &out, |_| {})).unwrap();
    assert_eq!(sets.len(), 1);
    assert_eq!(std::fs::read_dir(out.join("manifests")).unwrap().count(), 1);
}

#[test]
fn empty_predictions_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), "");
    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "[]").unwrap();
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace(&format!("{:?}", fixture("predictions.json").display().to_string()), &format!("{:?}", empty.display().to_string()));
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    let c = ctx(Some(cfg), &out, |g| g.audit = true);
    cmd_stratify(&c).unwrap();
    let (metrics, _) = cmd_evaluate(&c, None).unwrap();
    assert!(metrics.iter().all(|m| m.accuracy == 0.0 && m.correct == 0));
    let audit = std::fs::read_to_string(out.join("audit.jsonl")).unwrap();
    assert_eq!(audit.lines().count(), 4 * 43);
}

#[test]
fn emit_csv_writes_one_row_per_condition() {
    let out = tempfile::tempdir().unwrap();
    cmd_compare(&ctx(None, out.path(), |g| g.emit_csv = true), &fixture_metrics(), None).unwrap();
    let csv = std::fs::read_to_string(out.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().nth(3).unwrap().starts_with("Buildings,40,48,"));
}

#[test]
fn synth_files_parse_strictly_and_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.toml");
    std::fs::write(
        &cfg,
        r#"schema_version = 1
[study]
seed = 5
[synth]
n_images = 40
classes = ["car", "truck"]
class_weights = [0.6, 0.4]
objects_per_image = [0, 4]
context_tags = [{ tag = "building", prevalence = 0.5 }]
[detector]
p_base = 0.6
context_boosts = { building = 0.25 }
p_duplicate = 0.1
p_misclass = 0.05
bbox_jitter = 0.05
"#,
    )
    .unwrap();
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        cmd_synth(&ctx(Some(cfg.clone()), &out, |_| {})).unwrap();
        ["annotations.json", "predictions.json", "tags.csv"].map(|f| std::fs::read(out.join(f)).unwrap())
    };
    let first = run("a");
    assert_eq!(first, run("b"));
    let strict = ParseOptions { lenient: false };
    let (_, w) = parse_annotations_with(&first[0], strict).unwrap();
    assert!(w.is_empty());
    let (_, w) = parse_predictions_with(&first[1], strict).unwrap();
    assert!(w.is_empty());
    parse_scene_tags(&first[2]).unwrap();
}

#[test]
fn invalid_config_exits_3_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "schema_version = 1\n[study]\nn = \"many\"\n").unwrap();
    let out = dir.path().join("out");
    let s = bin().args(["run", "--config"]).arg(&cfg).arg("--out-dir").arg(&out).output().unwrap();
    assert_eq!(s.status.code(), Some(3));
    assert!(!out.exists());

    let missing = config_in(dir.path(), "");
    let text = std::fs::read_to_string(&missing).unwrap().replace("tags.csv", "nope.csv");
    std::fs::write(&missing, text).unwrap();
    let s = bin().args(["run", "--config"]).arg(&missing).arg("--out-dir").arg(&out).output().unwrap();
    assert_eq!(s.status.code(), Some(3));
    assert!(!out.exists());

    let s = bin().args(["run", "--no-such-flag"]).output().unwrap();
    assert_eq!(s.status.code(), Some(3));
}

#[test]
fn unmet_tolerance_exits_2_with_best_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), "");
    let s = bin()
        .args(["stratify", "--tolerance", "0.01", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(s.status.code(), Some(2));
    let err = String::from_utf8_lossy(&s.stderr);
    assert!(err.contains("best divergence"), "{err}");

    let s = bin().args(["stratify", "--n", "44", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(s.status.code(), Some(2));
}

#[test]
fn binary_prints_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = bin();
    cmd.arg("compare").args(fixture_metrics()).arg("--out-dir").arg(dir.path());
    let s = cmd.output().unwrap();
    assert_eq!(s.status.code(), Some(0));
    let md = String::from_utf8(s.stdout).unwrap();
    assert!(md.contains("| Contributes to detection? | N/A | No | Yes | Yes |"));
}
