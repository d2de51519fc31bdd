//! Experiment configuration: a TOML document with one section per stage.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use icon_probe_core::atlas::{AtlasConfig, AtlasInit, DEFAULT_MAX_SUBJECTS};
use icon_probe_core::clinical::Task;
use icon_probe_core::eval::ReportLayout;
use icon_probe_core::icon::TrainConfig;
use icon_probe_core::pipeline::{AssembleMode, PreprocessPlan, PATCH_INTENSITY, TOY_AFFINE};
use icon_probe_core::probe::{AdamWConfig, ProbeConfig};
use icon_probe_core::synth::CohortConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub synth: CohortConfig,
    #[serde(default)]
    pub registration: RegistrationSection,
    #[serde(default)]
    pub atlas: AtlasSection,
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub probe: ProbeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Root under which run directories are created.
    pub out: PathBuf,
    /// Seeds the cohort, registration training, split and probe.
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            out: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

/// External inputs. Anything left unset is produced by an upstream stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub clinical: Option<PathBuf>,
    /// Directory of `<patient>_<side>_m<month>.raw` (or `.nii`) volumes.
    pub volumes: Option<PathBuf>,
    pub atlas: Option<PathBuf>,
    /// Registration weights written by the register stage.
    pub stack: Option<PathBuf>,
    /// Directory of `<patient>_<side>_m<month>.ipdsp` (or `.ipaff`) files
    /// for plans with nonparametric alignment.
    pub transforms: Option<PathBuf>,
    /// Feature store (directory with index.jsonl) holding exported features.
    pub features: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationSection {
    pub train_pairs: usize,
    /// Feature length scale as a fraction of the half field of view.
    pub length_scale: f64,
    pub epochs: usize,
    pub resolution: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub fd_step: f64,
}

impl Default for RegistrationSection {
    fn default() -> Self {
        RegistrationSection {
            train_pairs: 32,
            length_scale: 1.0,
            epochs: 10,
            resolution: Some(16),
            batch_size: 4,
            lr: 0.02,
            fd_step: 1e-4,
        }
    }
}

impl RegistrationSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            resolution: self.resolution,
            batch_size: self.batch_size,
            optimizer: AdamWConfig {
                lr: self.lr,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            fd_step: self.fd_step,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtlasSection {
    pub iterations: usize,
    pub step: f64,
    pub tolerance_voxels: f64,
    pub max_subjects: usize,
    /// Start from the population mean when unset, else from this subject.
    pub init_subject: Option<usize>,
}

impl Default for AtlasSection {
    fn default() -> Self {
        let d = AtlasConfig::default();
        AtlasSection {
            iterations: d.iterations,
            step: d.step,
            tolerance_voxels: d.tolerance_voxels,
            max_subjects: DEFAULT_MAX_SUBJECTS,
            init_subject: None,
        }
    }
}

impl AtlasSection {
    pub fn atlas_config(&self) -> AtlasConfig {
        AtlasConfig {
            iterations: self.iterations,
            step: self.step,
            tolerance_voxels: self.tolerance_voxels,
            init: self.init_subject.map_or(AtlasInit::Mean, AtlasInit::Subject),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_name")]
    pub name: String,
    pub task: String,
    /// Report layout; chosen from the task when unset.
    #[serde(default)]
    pub layout: Option<String>,
    #[serde(default = "default_plans")]
    pub plans: Vec<String>,
    /// Visits used by single-image and pair tasks.
    #[serde(default)]
    pub months: Vec<u32>,
    /// Inputs and target of the future tasks.
    #[serde(default)]
    pub input_months: Vec<u32>,
    #[serde(default)]
    pub target_month: Option<u32>,
    pub features: Vec<FeatureSection>,
    #[serde(default = "default_sweep")]
    pub sweep_leaves: Vec<usize>,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_plans() -> Vec<String> {
    vec!["none".into()]
}

fn default_sweep() -> Vec<usize> {
    vec![1, 2, 3, 4]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSection {
    /// "patch-intensity", "toy-affine", or the name of an exported extractor.
    pub extractor: String,
    pub modes: Vec<String>,
    /// Layer of an exported extractor.
    #[serde(default)]
    pub layer: Option<String>,
    #[serde(default = "default_leaves")]
    pub leaves: Vec<usize>,
    #[serde(default = "default_patches")]
    pub patches: usize,
    #[serde(default = "default_sub")]
    pub sub: usize,
}

fn default_leaves() -> Vec<usize> {
    vec![1, 2, 3]
}

fn default_patches() -> usize {
    4
}

fn default_sub() -> usize {
    2
}

/// Which examples a task draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Single,
    Pair,
    Future,
}

pub fn task_kind(task: Task) -> TaskKind {
    match task {
        Task::Klg4 | Task::Pain2 => TaskKind::Single,
        Task::ProgKlg | Task::ProgJsw => TaskKind::Pair,
        Task::FutureKlg | Task::FuturePain => TaskKind::Future,
    }
}

/// A configuration problem with a stable code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub code: &'static str,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

fn diag(code: &'static str, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        code,
        message: message.into(),
    }
}

pub fn parse_config(text: &str, origin: &Path) -> std::result::Result<Config, Diagnostic> {
    toml::from_str(text).map_err(|e| diag("CFG-PARSE", format!("{}: {e}", origin.display())))
}

/// Reads the config, makes data paths absolute relative to the config file
/// and applies the command-line overrides. Every per-section seed is
/// replaced by the run seed.
pub fn load_config(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Config> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = parse_config(&text, path).map_err(|d| anyhow::anyhow!("{d}"))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = if base.as_os_str().is_empty() {
        std::env::current_dir()?
    } else {
        std::fs::canonicalize(&base).unwrap_or(base)
    };
    cfg.resolve(&base, seed, out);
    Ok(cfg)
}

impl Config {
    pub fn resolve(&mut self, base: &Path, seed: Option<u64>, out: Option<&Path>) {
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(o) = out {
            self.run.out = o.to_path_buf();
        }
        abs(&mut self.run.out);
        let d = &mut self.data;
        for p in [
            &mut d.clinical,
            &mut d.volumes,
            &mut d.atlas,
            &mut d.stack,
            &mut d.transforms,
            &mut d.features,
        ]
        .into_iter()
        .flatten()
        {
            abs(p);
        }
        if let Some(s) = seed {
            self.run.seed = s;
        }
        self.synth.seed = self.run.seed;
        self.probe.seed = self.run.seed;
    }

    pub fn task(&self) -> Result<Task> {
        Ok(Task::parse(&self.experiment.task)?)
    }

    pub fn layout(&self) -> Result<ReportLayout> {
        match &self.experiment.layout {
            Some(l) => Ok(ReportLayout::parse(l)?),
            None => Ok(match task_kind(self.task()?) {
                TaskKind::Single => ReportLayout::Table1,
                TaskKind::Pair => ReportLayout::Table2,
                TaskKind::Future => ReportLayout::Table3,
            }),
        }
    }

    pub fn plans(&self) -> Result<Vec<PreprocessPlan>> {
        self.experiment
            .plans
            .iter()
            .map(|p| Ok(PreprocessPlan::from_flags(p)?))
            .collect()
    }

    /// Whether the cohort comes from external files rather than the
    /// synth-cohort stage.
    pub fn external_data(&self) -> bool {
        self.data.clinical.is_some() || self.data.volumes.is_some()
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Structural checks that need no upstream artifacts.
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let invalid = |m: String| diag("CFG-INVALID", m);
        let task = match Task::parse(&self.experiment.task) {
            Ok(t) => Some(t),
            Err(e) => {
                out.push(invalid(format!("experiment.task: {e}")));
                None
            }
        };
        if let Some(l) = &self.experiment.layout {
            if let Err(e) = ReportLayout::parse(l) {
                out.push(invalid(format!("experiment.layout: {e}")));
            }
        }
        let mut plans = Vec::new();
        if self.experiment.plans.is_empty() {
            out.push(invalid("experiment.plans is empty".into()));
        }
        for (i, p) in self.experiment.plans.iter().enumerate() {
            match PreprocessPlan::from_flags(p) {
                Ok(plan) => plans.push(plan),
                Err(e) => out.push(invalid(format!("experiment.plans[{i}]: {e}"))),
            }
        }
        match task.map(task_kind) {
            Some(TaskKind::Future) => {
                if self.experiment.input_months.is_empty() {
                    out.push(invalid("experiment.input_months is empty".into()));
                }
                match self.experiment.target_month {
                    None => out.push(invalid("experiment.target_month is required for future tasks".into())),
                    Some(t) if self.experiment.input_months.iter().any(|&m| m >= t) => {
                        out.push(invalid("experiment.input_months must precede target_month".into()))
                    }
                    _ => {}
                }
            }
            Some(_) if self.experiment.months.is_empty() => out.push(invalid("experiment.months is empty".into())),
            _ => {}
        }
        if self.experiment.features.is_empty() {
            out.push(invalid("experiment.features is empty".into()));
        }
        for (i, f) in self.experiment.features.iter().enumerate() {
            let at = format!("experiment.features[{i}]");
            if f.modes.is_empty() {
                out.push(invalid(format!("{at}.modes is empty")));
            }
            for m in &f.modes {
                let mode = match AssembleMode::parse(m) {
                    Ok(mode) => mode,
                    Err(e) => {
                        out.push(invalid(format!("{at}.modes: {e}")));
                        continue;
                    }
                };
                if let Some(reason) = mode_problem(task, &f.extractor, mode) {
                    out.push(invalid(format!("{at}: {reason}")));
                }
            }
            match f.extractor.as_str() {
                TOY_AFFINE => {
                    if f.leaves.is_empty() || f.leaves.iter().any(|&l| l == 0 || l > 5) {
                        out.push(invalid(format!("{at}.leaves must be within 1..=5")));
                    }
                }
                PATCH_INTENSITY => {
                    if f.patches == 0 || f.sub == 0 {
                        out.push(invalid(format!("{at}: patches and sub must be positive")));
                    }
                }
                _ => {
                    if f.layer.is_none() {
                        out.push(invalid(format!(
                            "{at}: exported extractor '{}' needs a layer",
                            f.extractor
                        )));
                    }
                    if self.data.features.is_none() {
                        out.push(diag(
                            "CFG-DATA-MISSING",
                            format!("{at}: exported extractor '{}' needs data.features", f.extractor),
                        ));
                    }
                }
            }
        }
        if self.experiment.sweep_leaves.iter().any(|&l| l == 0 || l > 5) {
            out.push(invalid("experiment.sweep_leaves must be within 1..=5".into()));
        }
        if self.data.clinical.is_some() != self.data.volumes.is_some() {
            out.push(invalid("data.clinical and data.volumes must be set together".into()));
        }
        fn missing(p: &Option<PathBuf>) -> Option<&PathBuf> {
            p.as_ref().filter(|p| !p.exists())
        }
        for (name, p) in [
            ("data.clinical", &self.data.clinical),
            ("data.volumes", &self.data.volumes),
            ("data.transforms", &self.data.transforms),
            ("data.features", &self.data.features),
        ] {
            if let Some(p) = missing(p) {
                out.push(diag(
                    "CFG-DATA-MISSING",
                    format!("{name}: {} does not exist", p.display()),
                ));
            }
        }
        if let Some(p) = missing(&self.data.atlas) {
            out.push(diag(
                "CFG-ATLAS-MISSING",
                format!("data.atlas: {} does not exist", p.display()),
            ));
        }
        if let Some(p) = missing(&self.data.stack) {
            out.push(diag(
                "CFG-STACK-MISSING",
                format!("data.stack: {} does not exist", p.display()),
            ));
        }
        if plans.iter().any(|p| p.nonparam_align) {
            if self.data.transforms.is_none() {
                out.push(diag(
                    "CFG-TRANSFORMS-MISSING",
                    "plans with D need data.transforms (imported displacement fields)",
                ));
            }
            if self.data.atlas.is_none() {
                out.push(diag(
                    "CFG-ATLAS-MISSING",
                    "plans with D need data.atlas, the grid the imported fields were computed on",
                ));
            }
        }
        out
    }
}

fn mode_problem(task: Option<Task>, extractor: &str, mode: AssembleMode) -> Option<String> {
    use AssembleMode::*;
    if extractor == TOY_AFFINE && mode != RegPair {
        return Some(format!("{TOY_AFFINE} only supports reg_pair, got {}", mode.name()));
    }
    if extractor != TOY_AFFINE && mode == RegPair {
        return Some(format!("reg_pair needs the {TOY_AFFINE} extractor, got {extractor}"));
    }
    let task = task?;
    let ok = match task_kind(task) {
        TaskKind::Single => matches!(mode, Single | AtlasDiff | RegPair),
        TaskKind::Pair => matches!(mode, PairConcat | RegPair),
        TaskKind::Future => matches!(mode, Single | MultiConcat | RegPair | AtlasDiff),
    };
    (!ok).then(|| format!("mode {} does not fit task {}", mode.name(), task.name()))
}
