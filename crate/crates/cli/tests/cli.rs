use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use icon_probe_core::clinical::{read_clinical_csv, split_patients, write_clinical_csv, Side, Split};
use icon_probe_core::pipeline::{FeatureMeta, FeatureRecord, FeatureStore};

const BIN: &str = env!("CARGO_BIN_EXE_icon-probe");

const SMALL: &str = r#"
[run]
seed = 3

[synth]
patients = 10
size = 16
spacing = 4.0
months = [0, 12, 24]

[registration]
train_pairs = 4
epochs = 2
batch_size = 2

[atlas]
iterations = 2

[probe]
iterations = 200
batch_size = 32
log_every = 20
"#;

const PIPELINE: &str = r#"
[experiment]
name = "small"
task = "prog_jsw"
layout = "table1"
months = [0, 12, 24]
plans = ["none", "A+C"]
sweep_leaves = [1, 2, 3, 4]

[[experiment.features]]
extractor = "patch-intensity"
modes = ["pair_concat"]
patches = 2
sub = 2

[[experiment.features]]
extractor = "toy-affine"
modes = ["reg_pair"]
leaves = [1, 2]
"#;

const PATCH_ONLY: &str = r#"
[experiment]
task = "prog_jsw"
months = [0, 12, 24]

[[experiment.features]]
extractor = "patch-intensity"
modes = ["pair_concat"]
patches = 2
"#;

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("{SMALL}\n{body}")).unwrap();
    path
}

fn run(cmd: &str, config: &Path) -> Output {
    Command::new(BIN).arg(cmd).arg("--config").arg(config).output().unwrap()
}

fn ok(cmd: &str, config: &Path) -> String {
    let out = run(cmd, config);
    assert!(
        out.status.success(),
        "{cmd} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Run directory printed by a stage: "run <id> <dir>".
fn run_dir(stdout: &str) -> PathBuf {
    let line = stdout.lines().find(|l| l.starts_with("run ")).expect("run line");
    PathBuf::from(line.split_whitespace().nth(2).expect("run dir"))
}

fn run_id(stdout: &str) -> String {
    let line = stdout.lines().find(|l| l.starts_with("run ")).expect("run line");
    line.split_whitespace().nth(1).unwrap().to_string()
}

#[test]
fn validate_accepts_a_good_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", PATCH_ONLY);
    assert_eq!(ok("validate", &cfg).trim(), "OK");
}

#[test]
fn validate_reports_a_missing_atlas() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("[data]\natlas = \"nowhere/atlas.raw\"\n{PATCH_ONLY}");
    let cfg = write_config(tmp.path(), "c.toml", &body);
    let out = run("validate", &cfg);
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("CFG-ATLAS-MISSING"), "{text}");
}

#[test]
fn validate_reports_parse_errors_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[experiment]\ntask = \"prog_jsw\"\nmonths = [0,\n").unwrap();
    let out = run("validate", &cfg);
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("CFG-PARSE") && text.contains("bad.toml"), "{text}");
}

fn exported(patient: &str, shape: Vec<usize>) -> FeatureRecord {
    let n = shape.iter().product();
    let meta = FeatureMeta {
        patient_id: patient.into(),
        side: Side::Left,
        timepoint_months: 0,
        extractor: "seg-net".into(),
        layer: "enc4".into(),
        preprocess_fingerprint: icon_probe_core::pipeline::PreprocessPlan::default().fingerprint(),
        shape,
        extra: Default::default(),
    };
    FeatureRecord::new(meta, vec![0.5; n]).unwrap()
}

#[test]
fn validate_reports_dimension_mismatch_naming_both_records() {
    let tmp = tempfile::tempdir().unwrap();
    let store_dir = tmp.path().join("exported");
    let mut store = FeatureStore::open(&store_dir).unwrap();
    store.insert(&exported("P1", vec![8])).unwrap();
    store.insert(&exported("P2", vec![6])).unwrap();
    let body = r#"
[data]
features = "exported"

[experiment]
task = "klg4"
months = [0]

[[experiment.features]]
extractor = "seg-net"
layer = "enc4"
modes = ["single"]
"#;
    let cfg = write_config(tmp.path(), "c.toml", body);
    let out = run("validate", &cfg);
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("FEAT-DIM-MISMATCH"), "{text}");
    assert!(text.contains("P1") && text.contains("P2"), "{text}");
}

#[test]
fn synth_cohort_is_byte_identical_for_a_fixed_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = write_config(a.path(), "c.toml", PATCH_ONLY);
    let cb = write_config(b.path(), "c.toml", PATCH_ONLY);
    let da = run_dir(&ok("synth-cohort", &ca));
    let db = run_dir(&ok("synth-cohort", &cb));
    assert_eq!(da.file_name(), db.file_name());
    let files = |d: &Path| {
        let rec: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run.json")).unwrap()).unwrap();
        rec["files"]
            .as_object()
            .unwrap()
            .keys()
            .filter(|k| k.starts_with("artifacts/"))
            .cloned()
            .collect::<Vec<_>>()
    };
    let names = files(&da);
    assert!(names.iter().any(|n| n.ends_with(".raw")));
    assert!(names.iter().any(|n| n.ends_with("clinical.csv")));
    assert_eq!(names, files(&db));
    for n in &names {
        assert_eq!(fs::read(da.join(n)).unwrap(), fs::read(db.join(n)).unwrap(), "{n}");
    }
}

#[test]
fn missing_upstream_names_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", PATCH_ONLY);
    let out = run("features", &cfg);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("STAGE-MISSING") && err.contains("'synth-cohort'"), "{err}");
}

#[test]
fn single_class_test_split_fails_naming_the_metric() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "synth.toml", PATCH_ONLY);
    let art = run_dir(&ok("synth-cohort", &cfg)).join("artifacts");

    // flatten the joint space of every test patient so the test split has
    // no progressor
    let mut records = read_clinical_csv(&art.join("clinical.csv")).unwrap();
    let ids: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    let splits = split_patients(&ids, 3);
    for r in &mut records {
        if splits[&r.patient_id] == Split::Test {
            r.jsw_mm = 5.0;
        }
    }
    assert!(records
        .iter()
        .any(|r| splits[&r.patient_id] == Split::Train && r.jsw_mm < 4.0));
    write_clinical_csv(&tmp.path().join("clinical.csv"), &records).unwrap();

    let body = format!(
        "[data]\nclinical = \"clinical.csv\"\nvolumes = \"{}\"\n{PATCH_ONLY}",
        art.join("volumes").display()
    );
    let cfg = write_config(tmp.path(), "external.toml", &body);
    ok("preprocess", &cfg);
    ok("features", &cfg);
    let out = run("probe", &cfg);
    assert!(!out.status.success());
    assert_ne!(out.status.code(), Some(0));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("METRIC-UNDEFINED") && err.contains("auc"), "{err}");
}

#[test]
fn full_pipeline_reports_reruns_and_sweeps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", PIPELINE);
    for stage in ["synth-cohort", "register", "atlas", "preprocess", "features"] {
        ok(stage, &cfg);
    }
    let probe = ok("probe", &cfg);
    let report = ok("report", &cfg);

    let csv = fs::read_to_string(run_dir(&report).join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "experiment,flags,extractor,mode,metric,value,n");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // two plans x two extractor/mode pairs x {acc, ap, auc, f1}
    assert_eq!(rows.len(), 16, "{csv}");
    for plan in ["none", "A+C"] {
        for (extractor, mode) in [("patch-intensity", "pair_concat"), ("toy-affine", "reg_pair")] {
            for metric in ["acc", "ap", "auc", "f1"] {
                let row = rows
                    .iter()
                    .find(|r| r[1] == plan && r[2] == extractor && r[3] == mode && r[4] == metric)
                    .unwrap_or_else(|| panic!("no {plan} {extractor} {mode} {metric} in\n{csv}"));
                let v: f64 = row[5].parse().unwrap();
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    // identical config: same id, artifacts verified, same bytes
    let probe_dir = run_dir(&probe);
    let before = fs::read(probe_dir.join("metrics.csv")).unwrap();
    let again = ok("probe", &cfg);
    assert_eq!(run_id(&again), run_id(&probe));
    assert!(again.contains("artifacts verified"), "{again}");
    assert_eq!(fs::read(probe_dir.join("metrics.csv")).unwrap(), before);

    let sweep = ok("fig1-sweep", &cfg);
    let sweep_dir = tmp.path().join("runs").join(run_id(&sweep));
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(sweep_dir.join("artifacts/rows.json")).unwrap()).unwrap();
    for plan in ["none", "A+C"] {
        let n = rows.iter().filter(|r| r["flags"] == plan).count();
        assert_eq!(n, 4, "plan {plan}");
    }
    let log = fs::read_to_string(sweep_dir.join("log.jsonl")).unwrap();
    assert!(log
        .lines()
        .all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
}

#[test]
fn one_patient_one_visit_gives_one_volume_and_record() {
    let tmp = tempfile::tempdir().unwrap();
    let body = PATCH_ONLY.replace("[experiment]", "[experiment]\nname = \"one\"");
    let text = SMALL
        .replace("patients = 10", "patients = 1\nboth_knees = false")
        .replace(
            "months = [0, 12, 24]\n\n[registration]",
            "months = [0]\n\n[registration]",
        );
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, format!("{text}\n{body}")).unwrap();
    let art = run_dir(&ok("synth-cohort", &cfg)).join("artifacts");
    assert_eq!(fs::read_dir(art.join("volumes")).unwrap().count(), 1);
    assert_eq!(read_clinical_csv(&art.join("clinical.csv")).unwrap().len(), 1);
}
