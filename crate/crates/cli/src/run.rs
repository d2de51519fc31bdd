//! Run directories: `<out>/<id>/{config.resolved, artifacts/, metrics.csv,
//! log.jsonl, run.json}`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use icon_probe_core::eval::{render_report, ReportLayout, ResultRow};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const RECORD_FILE: &str = "run.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.resolved";
pub const ARTIFACTS: &str = "artifacts";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub stage: String,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Everything the id was derived from.
    pub inputs: Value,
    /// Relative path to sha256 for every file in the run directory except
    /// this record.
    pub files: BTreeMap<String, String>,
    pub rows: Vec<ResultRow>,
}

/// Upstream output that has not been produced yet.
#[derive(Debug)]
pub struct MissingStage {
    pub stage: String,
    pub dir: PathBuf,
}

impl std::fmt::Display for MissingStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "missing upstream artifact: stage '{}' has not been run for this configuration (expected {})",
            self.stage,
            self.dir.display()
        )
    }
}

impl std::error::Error for MissingStage {}

pub fn stage_id(stage: &str, inputs: &Value) -> String {
    let doc = json!({
        "stage": stage,
        "version": env!("CARGO_PKG_VERSION"),
        "inputs": inputs,
    });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    hex::encode(digest)[..16].to_string()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn walk(dir: &Path, base: &Path, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            walk(&path, base, out)?;
        } else {
            let rel = path.strip_prefix(base).expect("walk stays under base");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Finished run directory of an upstream stage.
pub fn upstream(root: &Path, stage: &str, inputs: &Value) -> Result<PathBuf> {
    let dir = root.join(stage_id(stage, inputs));
    if !dir.join(RECORD_FILE).is_file() {
        return Err(MissingStage {
            stage: stage.into(),
            dir,
        }
        .into());
    }
    Ok(dir)
}

pub fn read_record(dir: &Path) -> Result<RunRecord> {
    let path = dir.join(RECORD_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

pub struct Run {
    pub id: String,
    pub stage: String,
    pub dir: PathBuf,
    inputs: Value,
    started_unix: u64,
    clock: Instant,
    log: fs::File,
    previous: Option<RunRecord>,
}

impl Run {
    pub fn open(root: &Path, stage: &str, inputs: Value, resolved_config: &str) -> Result<Run> {
        let id = stage_id(stage, &inputs);
        let dir = root.join(&id);
        fs::create_dir_all(dir.join(ARTIFACTS)).with_context(|| format!("creating {}", dir.display()))?;
        let previous = match dir.join(RECORD_FILE).is_file() {
            true => Some(read_record(&dir)?),
            false => None,
        };
        fs::write(dir.join(CONFIG_FILE), resolved_config)?;
        let log = fs::File::create(dir.join(LOG_FILE))?;
        let mut run = Run {
            id,
            stage: stage.into(),
            dir,
            inputs,
            started_unix: unix_now(),
            clock: Instant::now(),
            log,
            previous,
        };
        let rerun = run.previous.is_some();
        run.log("start", json!({ "rerun": rerun }))?;
        Ok(run)
    }

    pub fn artifacts(&self) -> PathBuf {
        self.dir.join(ARTIFACTS)
    }

    /// Appends one JSON line `{stage, event, t, ...fields}`.
    pub fn log(&mut self, event: &str, fields: Value) -> Result<()> {
        let mut line = json!({
            "stage": self.stage,
            "event": event,
            "t": (self.clock.elapsed().as_secs_f64() * 1000.0).round() / 1000.0,
        });
        if let (Some(obj), Value::Object(extra)) = (line.as_object_mut(), fields) {
            obj.extend(extra);
        }
        writeln!(self.log, "{line}")?;
        Ok(())
    }

    /// Writes metrics.csv and run.json. On a rerun every output must hash as
    /// before.
    pub fn finish(mut self, rows: Vec<ResultRow>, layout: ReportLayout) -> Result<RunRecord> {
        let report = render_report(&rows, layout)?;
        fs::write(self.dir.join(METRICS_FILE), &report.csv)?;
        self.log("finish", json!({ "rows": rows.len() }))?;
        self.log.flush()?;

        let mut names = Vec::new();
        walk(&self.dir, &self.dir, &mut names)?;
        let mut files = BTreeMap::new();
        for name in names.into_iter().filter(|n| n != RECORD_FILE) {
            files.insert(name.clone(), sha256_file(&self.dir.join(&name))?);
        }
        if let Some(prev) = &self.previous {
            for (name, hash) in &prev.files {
                // The log has timings and the resolved config may differ in
                // sections this stage does not read.
                if name == LOG_FILE || name == CONFIG_FILE {
                    continue;
                }
                match files.get(name) {
                    Some(h) if h == hash => {}
                    Some(h) => bail!(
                        "rerun of {} produced a different {name} (recorded {}, now {})",
                        self.id,
                        &hash[..12],
                        &h[..12]
                    ),
                    None => bail!("rerun of {} did not produce {name}", self.id),
                }
            }
        }
        let record = RunRecord {
            id: self.id.clone(),
            stage: self.stage.clone(),
            version: env!("CARGO_PKG_VERSION").into(),
            started_unix: self.started_unix,
            finished_unix: unix_now(),
            inputs: self.inputs.clone(),
            files,
            rows,
        };
        fs::write(self.dir.join(RECORD_FILE), serde_json::to_string_pretty(&record)?)?;
        Ok(record)
    }

    pub fn verified(&self) -> bool {
        self.previous.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_depend_on_stage_and_inputs() {
        let a = stage_id("atlas", &json!({"x": 1}));
        assert_eq!(a, stage_id("atlas", &json!({"x": 1})));
        assert_ne!(a, stage_id("atlas", &json!({"x": 2})));
        assert_ne!(a, stage_id("probe", &json!({"x": 1})));
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn rerun_verifies_hashes() {
        let tmp = tempfile::tempdir().unwrap();
        let inputs = json!({"k": "v"});
        let run = Run::open(tmp.path(), "demo", inputs.clone(), "a = 1\n").unwrap();
        fs::write(run.artifacts().join("out.txt"), "same").unwrap();
        let rec = run.finish(Vec::new(), ReportLayout::Table1).unwrap();
        assert!(rec.files.contains_key("artifacts/out.txt"));
        assert!(rec.files.contains_key("metrics.csv"));

        let run = Run::open(tmp.path(), "demo", inputs.clone(), "a = 1\n").unwrap();
        assert!(run.verified());
        fs::write(run.artifacts().join("out.txt"), "same").unwrap();
        run.finish(Vec::new(), ReportLayout::Table1).unwrap();

        let run = Run::open(tmp.path(), "demo", inputs.clone(), "a = 1\n").unwrap();
        fs::write(run.artifacts().join("out.txt"), "changed").unwrap();
        let err = run.finish(Vec::new(), ReportLayout::Table1).unwrap_err();
        assert!(err.to_string().contains("artifacts/out.txt"), "{err}");
    }

    #[test]
    fn missing_upstream_names_the_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let err = upstream(tmp.path(), "atlas", &json!({})).unwrap_err();
        assert!(err.to_string().contains("stage 'atlas'"));
    }
}
