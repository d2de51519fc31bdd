//! Dry-run checks of a config and the feature stores it points at.

use std::path::Path;

use icon_probe_core::pipeline::{FeatureMeta, FeatureStore};

use crate::config::{parse_config, Config, Diagnostic};
use crate::run::ARTIFACTS;
use crate::stages::{inputs, section_layer, ATLAS_ID};

pub fn validate_file(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Vec<Diagnostic> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            return vec![Diagnostic {
                code: "CFG-READ",
                message: format!("{}: {e}", path.display()),
            }]
        }
    };
    let mut cfg = match parse_config(&text, path) {
        Ok(c) => c,
        Err(d) => return vec![d],
    };
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| std::env::current_dir().unwrap_or_default(), Path::to_path_buf);
    cfg.resolve(&base, seed, out);
    validate(&cfg)
}

pub fn validate(cfg: &Config) -> Vec<Diagnostic> {
    let mut out = cfg.diagnostics();
    if !out.is_empty() {
        return out;
    }
    let mut stores = Vec::new();
    if let Some(dir) = cfg.data.features.as_ref().filter(|d| d.is_dir()) {
        stores.push(dir.clone());
    }
    if let Ok(inp) = inputs("features", cfg) {
        let dir = cfg
            .run
            .out
            .join(crate::run::stage_id("features", &inp))
            .join(ARTIFACTS)
            .join("features");
        if dir.is_dir() {
            stores.push(dir);
        }
    }
    let mut metas: Vec<FeatureMeta> = Vec::new();
    for dir in &stores {
        match FeatureStore::open(dir) {
            Ok(s) => metas.extend(s.metas().cloned()),
            Err(e) => out.push(Diagnostic {
                code: "FEAT-STORE",
                message: format!("{}: {e}", dir.display()),
            }),
        }
    }
    out.extend(dimension_mismatches(cfg, &metas));
    out
}

/// Records read by one feature section under one plan must share a shape.
fn dimension_mismatches(cfg: &Config, metas: &[FeatureMeta]) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let Ok(plans) = cfg.plans() else { return out };
    for plan in &plans {
        let fp = plan.fingerprint();
        for f in &cfg.experiment.features {
            let layer = section_layer(f);
            let mut first: Option<&FeatureMeta> = None;
            for m in metas.iter().filter(|m| {
                m.extractor == f.extractor
                    && m.preprocess_fingerprint == fp
                    && m.patient_id != ATLAS_ID
                    && (m.layer == layer || m.layer.starts_with(&format!("{layer}@")))
            }) {
                match first {
                    None => first = Some(m),
                    Some(a) if a.shape != m.shape => {
                        out.push(Diagnostic {
                            code: "FEAT-DIM-MISMATCH",
                            message: format!(
                                "{} has shape {:?} but {} has shape {:?}",
                                a.key(),
                                a.shape,
                                m.key(),
                                m.shape
                            ),
                        });
                        break;
                    }
                    Some(_) => {}
                }
            }
        }
    }
    out
}
