//! One function per subcommand. Each stage reads upstream run directories
//! located by id and writes its own.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use icon_probe_core::atlas::{build_atlas, read_atlas, select_healthy, write_atlas};
use icon_probe_core::clinical::{
    assign_splits, build_future_dataset, pair_examples, read_clinical_csv, single_examples, split_patients,
    write_clinical_csv, ClinicalRecord, KneeKey, LabeledExample, Side, Task,
};
use icon_probe_core::eval::{render_report, ReportLayout, ResultRow};
use icon_probe_core::experiment::e2e::{fresh_affine_stack, random_pairs};
use icon_probe_core::experiment::{fit_and_score, standard_metrics};
use icon_probe_core::geometry::io::{read_transform, write_affine};
use icon_probe_core::geometry::{read_volume, write_volume, MapTransform, Volume};
use icon_probe_core::icon::{read_affine_stack, train_registration, write_affine_stack, RegStack};
use icon_probe_core::pipeline::{
    assemble, leaf_layer, preprocess, reg_features, reg_pair_layer, Alignment, AssembleMode, AssembleSpec, FeatureKey,
    FeatureMeta, FeatureRecord, FeatureStore, PatchIntensity, PreprocessPlan, RecordSource, PATCH_INTENSITY,
    TOY_AFFINE,
};
use icon_probe_core::probe::write_checkpoint;
use icon_probe_core::synth::generate_cohort;
use serde_json::{json, Value};

use crate::config::{task_kind, Config, FeatureSection, TaskKind};
use crate::run::{read_record, upstream, Run, ARTIFACTS};

/// Patient id of the atlas's own feature records.
pub const ATLAS_ID: &str = "atlas";

fn path_json(p: &Option<PathBuf>) -> Value {
    p.as_ref().map_or(Value::Null, |p| json!(p.display().to_string()))
}

/// Everything that determines a stage's output, with upstream stages
/// referenced by their ids.
pub fn inputs(stage: &str, cfg: &Config) -> Result<Value> {
    let id = |s: &str| -> Result<String> { Ok(crate::run::stage_id(s, &inputs(s, cfg)?)) };
    let data = || -> Result<Value> {
        Ok(if cfg.external_data() {
            json!({ "clinical": path_json(&cfg.data.clinical), "volumes": path_json(&cfg.data.volumes) })
        } else {
            json!({ "synth": id("synth-cohort")? })
        })
    };
    let stack = || -> Result<Value> {
        Ok(match &cfg.data.stack {
            Some(p) => json!({ "file": p.display().to_string() }),
            None => json!({ "register": id("register")? }),
        })
    };
    let atlas = || -> Result<Value> {
        Ok(match &cfg.data.atlas {
            Some(p) => json!({ "file": p.display().to_string() }),
            None => json!({ "atlas": id("atlas")? }),
        })
    };
    let e = &cfg.experiment;
    let examples = json!({
        "task": e.task, "months": e.months, "input_months": e.input_months,
        "target_month": e.target_month, "seed": cfg.run.seed,
    });
    Ok(match stage {
        "synth-cohort" => json!({ "synth": cfg.synth }),
        "register" => json!({ "data": data()?, "registration": cfg.registration, "seed": cfg.run.seed }),
        "atlas" => json!({ "data": data()?, "stack": stack()?, "atlas": cfg.atlas }),
        "preprocess" => {
            let needs_stack = cfg.plans()?.iter().any(|p| p.affine_align && !p.nonparam_align);
            json!({
                "data": data()?,
                "plans": e.plans,
                "stack": if needs_stack { stack()? } else { Value::Null },
                "atlas": if needs_stack { atlas()? } else { Value::Null },
                "examples": examples,
            })
        }
        "features" => json!({
            "preprocess": id("preprocess")?,
            "examples": examples,
            "features": e.features,
            "atlas": if needs_atlas(cfg)? { atlas()? } else { Value::Null },
            "stack": if e.features.iter().any(|f| f.extractor == TOY_AFFINE) { stack()? } else { Value::Null },
            "transforms": path_json(&cfg.data.transforms),
        }),
        "probe" => json!({
            "features": id("features")?,
            "external": path_json(&cfg.data.features),
            "probe": cfg.probe,
            "layout": cfg.layout()?,
            "name": e.name,
        }),
        "report" => json!({ "probe": id("probe")?, "layout": cfg.layout()? }),
        "fig1-sweep" => json!({
            "preprocess": id("preprocess")?,
            "examples": examples,
            "leaves": e.sweep_leaves,
            "stack": stack()?,
            "atlas": if needs_atlas(cfg)? { atlas()? } else { Value::Null },
            "transforms": path_json(&cfg.data.transforms),
            "probe": cfg.probe,
            "name": e.name,
        }),
        other => bail!("unknown stage '{other}'"),
    })
}

fn needs_atlas(cfg: &Config) -> Result<bool> {
    let kind = task_kind(cfg.task()?);
    let mode_needs = cfg.experiment.features.iter().any(|f| {
        f.modes.iter().any(|m| match AssembleMode::parse(m) {
            Ok(AssembleMode::AtlasDiff) => true,
            Ok(AssembleMode::RegPair) => kind == TaskKind::Single,
            _ => false,
        })
    });
    Ok(mode_needs || cfg.plans()?.iter().any(PreprocessPlan::needs_atlas))
}

fn open_run(cfg: &Config, stage: &str) -> Result<Run> {
    Run::open(&cfg.run.out, stage, inputs(stage, cfg)?, &cfg.to_toml()?)
}

fn upstream_dir(cfg: &Config, stage: &str) -> Result<PathBuf> {
    upstream(&cfg.run.out, stage, &inputs(stage, cfg)?)
}

pub fn volume_name(key: &KneeKey, month: u32) -> String {
    format!("{key}_m{month}")
}

/// Finds `<key>_m<month>.<ext>` for the first extension that exists.
fn find_file(dir: &Path, key: &KneeKey, month: u32, exts: &[&str]) -> Result<PathBuf> {
    let stem = volume_name(key, month);
    exts.iter()
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.is_file())
        .ok_or_else(|| anyhow!("no {stem}.{{{}}} in {}", exts.join(","), dir.display()))
}

struct Data {
    records: Vec<ClinicalRecord>,
    volumes: PathBuf,
}

impl Data {
    fn load(cfg: &Config) -> Result<Data> {
        if let (Some(c), Some(v)) = (&cfg.data.clinical, &cfg.data.volumes) {
            return Ok(Data {
                records: read_clinical_csv(c)?,
                volumes: v.clone(),
            });
        }
        let dir = upstream_dir(cfg, "synth-cohort")?.join(ARTIFACTS);
        Ok(Data {
            records: read_clinical_csv(&dir.join("clinical.csv"))?,
            volumes: dir.join("volumes"),
        })
    }

    fn volume(&self, key: &KneeKey, month: u32) -> Result<Volume> {
        let path = find_file(&self.volumes, key, month, &["raw", "nii"])?;
        read_volume(&path).with_context(|| format!("reading {}", path.display()))
    }
}

fn load_stack(cfg: &Config) -> Result<RegStack> {
    let path = match &cfg.data.stack {
        Some(p) => p.clone(),
        None => upstream_dir(cfg, "register")?.join(ARTIFACTS).join("stack.json"),
    };
    read_affine_stack(&path).with_context(|| format!("loading stack {}", path.display()))
}

fn load_atlas(cfg: &Config) -> Result<Volume> {
    let path = match &cfg.data.atlas {
        Some(p) => p.clone(),
        None => upstream_dir(cfg, "atlas")?.join(ARTIFACTS).join("atlas.raw"),
    };
    Ok(read_atlas(&path)
        .with_context(|| format!("loading atlas {}", path.display()))?
        .0)
}

/// Labeled examples of the configured task, split by patient.
pub fn examples(cfg: &Config, records: &[ClinicalRecord]) -> Result<Vec<LabeledExample>> {
    let task = cfg.task()?;
    let e = &cfg.experiment;
    let in_months: Vec<ClinicalRecord> = records
        .iter()
        .filter(|r| e.months.contains(&r.month))
        .cloned()
        .collect();
    let mut out = match task_kind(task) {
        TaskKind::Single => single_examples(&in_months, task)?,
        TaskKind::Pair => pair_examples(&in_months, task)?,
        TaskKind::Future => {
            let target = e
                .target_month
                .ok_or_else(|| anyhow!("experiment.target_month is required"))?;
            let ds = build_future_dataset(records, &e.input_months, target)?;
            if task == Task::FutureKlg {
                ds.klg
            } else {
                ds.pain
            }
        }
    };
    if out.is_empty() {
        bail!("task {} has no examples in the configured months", task.name());
    }
    let ids: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    assign_splits(&mut out, &split_patients(&ids, cfg.run.seed))?;
    Ok(out)
}

/// Every (knee, month) whose image some example reads.
fn needed_scans(examples: &[LabeledExample]) -> BTreeMap<KneeKey, BTreeSet<u32>> {
    let mut out: BTreeMap<KneeKey, BTreeSet<u32>> = BTreeMap::new();
    for e in examples {
        out.entry(e.key()).or_default().extend(&e.months);
    }
    out
}

pub fn synth_cohort(cfg: &Config) -> Result<Run> {
    let mut run = open_run(cfg, "synth-cohort")?;
    let cohort = generate_cohort(&cfg.synth)?;
    let art = run.artifacts();
    let vol_dir = art.join("volumes");
    fs::create_dir_all(&vol_dir)?;
    for (i, knee) in cohort.knees.iter().enumerate() {
        for &m in &cohort.config.months {
            let name = format!("{}.raw", volume_name(&knee.key(), m));
            write_volume(&cohort.render(i, m)?, vol_dir.join(name))?;
        }
    }
    write_clinical_csv(&art.join("clinical.csv"), &cohort.records)?;
    fs::write(art.join("manifest.json"), serde_json::to_string_pretty(&cohort)?)?;
    run.log(
        "cohort",
        json!({ "knees": cohort.knees.len(), "volumes": cohort.knees.len() * cohort.config.months.len() }),
    )?;
    Ok(run)
}

pub fn register(cfg: &Config) -> Result<Run> {
    let mut run = open_run(cfg, "register")?;
    let data = Data::load(cfg)?;
    // first visit of every knee
    let mut first: BTreeMap<KneeKey, u32> = BTreeMap::new();
    for r in &data.records {
        let m = first.entry(r.key()).or_insert(r.month);
        *m = (*m).min(r.month);
    }
    let knees: Vec<(&KneeKey, &u32)> = first.iter().collect();
    let reg = &cfg.registration;
    let mut pairs = Vec::with_capacity(reg.train_pairs);
    for (a, b) in random_pairs(knees.len(), reg.train_pairs, cfg.run.seed)? {
        pairs.push((
            data.volume(knees[a].0, *knees[a].1)?,
            data.volume(knees[b].0, *knees[b].1)?,
        ));
    }
    let grid = *pairs
        .first()
        .ok_or_else(|| anyhow!("registration.train_pairs is 0"))?
        .0
        .grid();
    let mut stack = fresh_affine_stack(&grid, reg.length_scale)?;
    let report = train_registration(&mut stack, &pairs, &reg.train_config(cfg.run.seed))?;
    write_affine_stack(&stack, &run.artifacts().join("stack.json"))?;
    run.log(
        "trained",
        json!({ "pairs": pairs.len(), "loss_history": report.loss_history, "final_loss": report.final_loss }),
    )?;
    Ok(run)
}

pub fn atlas(cfg: &Config) -> Result<Run> {
    let mut run = open_run(cfg, "atlas")?;
    let data = Data::load(cfg)?;
    let stack = load_stack(cfg)?;
    let healthy = select_healthy(&data.records, cfg.atlas.max_subjects);
    if healthy.is_empty() {
        bail!("no knee qualifies for the atlas (month 0, KLG 0, WOMAC 0)");
    }
    let images = healthy.iter().map(|k| data.volume(k, 0)).collect::<Result<Vec<_>>>()?;
    let acfg = cfg.atlas.atlas_config();
    let state = build_atlas(&images, &stack, &acfg)?;
    let names: Vec<String> = healthy.iter().map(ToString::to_string).collect();
    write_atlas(&run.artifacts().join("atlas.raw"), &state, &names, &acfg)?;
    run.log(
        "atlas",
        json!({ "subjects": names.len(), "iterations": state.iteration, "history": state.history }),
    )?;
    Ok(run)
}

pub fn preprocess_stage(cfg: &Config) -> Result<Run> {
    let mut run = open_run(cfg, "preprocess")?;
    let data = Data::load(cfg)?;
    let scans = needed_scans(&examples(cfg, &data.records)?);
    let mut written = 0;
    for plan in cfg.plans()? {
        if !(plan.affine_align && !plan.nonparam_align) {
            run.log(
                "skip",
                json!({ "plan": plan.flags(), "reason": "no affine alignment to compute" }),
            )?;
            continue;
        }
        let stack = load_stack(cfg)?;
        let atlas = load_atlas(cfg)?;
        let dir = run.artifacts().join(plan.flags());
        fs::create_dir_all(&dir)?;
        for (key, months) in &scans {
            for &m in months {
                let t = stack.transform(&data.volume(key, m)?, &atlas)?;
                let affine = t
                    .as_affine()
                    .ok_or_else(|| anyhow!("stack produced a non-affine map"))?;
                write_affine(affine, dir.join(format!("{}.ipaff", volume_name(key, m))))?;
                written += 1;
            }
        }
        run.log("aligned", json!({ "plan": plan.flags(), "scans": written }))?;
    }
    Ok(run)
}

/// Preprocessed scans of one plan.
struct Prepared<'a> {
    plan: PreprocessPlan,
    data: &'a Data,
    atlas: Option<&'a Volume>,
    transforms: Option<PathBuf>,
}

impl Prepared<'_> {
    fn new<'a>(
        cfg: &Config,
        plan: PreprocessPlan,
        data: &'a Data,
        atlas: Option<&'a Volume>,
        preprocess_dir: &Path,
    ) -> Result<Prepared<'a>> {
        let transforms = if plan.nonparam_align {
            Some(
                cfg.data
                    .transforms
                    .clone()
                    .ok_or_else(|| anyhow!("plan {} needs data.transforms", plan.flags()))?,
            )
        } else if plan.affine_align {
            Some(preprocess_dir.join(ARTIFACTS).join(plan.flags()))
        } else {
            None
        };
        if plan.needs_atlas() && atlas.is_none() {
            bail!("plan {} needs an atlas", plan.flags());
        }
        Ok(Prepared {
            plan,
            data,
            atlas,
            transforms,
        })
    }

    fn scan(&self, key: &KneeKey, month: u32) -> Result<Volume> {
        let img = self.data.volume(key, month)?;
        let t: Option<MapTransform> = match &self.transforms {
            Some(dir) => Some(read_transform(find_file(dir, key, month, &["ipdsp", "ipaff"])?)?),
            None => None,
        };
        let alignment = t.as_ref().map_or(Alignment::None, Alignment::Imported);
        Ok(preprocess(&img, self.atlas, &self.plan, alignment)?.volume)
    }

    /// The atlas with this plan's crop and normalization.
    fn atlas_scan(&self) -> Result<Volume> {
        let atlas = self.atlas.ok_or_else(|| anyhow!("no atlas loaded"))?;
        let plan = PreprocessPlan {
            affine_align: false,
            nonparam_align: false,
            ..self.plan.clone()
        };
        Ok(preprocess(atlas, None, &plan, Alignment::None)?.volume)
    }
}

fn record(key: FeatureKey, shape: Vec<usize>, payload: Vec<f32>) -> Result<FeatureRecord> {
    let meta = FeatureMeta {
        patient_id: key.patient_id,
        side: key.side,
        timepoint_months: key.month,
        extractor: key.extractor,
        layer: key.layer,
        preprocess_fingerprint: key.fingerprint,
        shape,
        extra: BTreeMap::new(),
    };
    Ok(FeatureRecord::new(meta, payload)?)
}

fn feature_key(key: &KneeKey, month: u32, extractor: &str, layer: String, fp: &str) -> FeatureKey {
    FeatureKey {
        patient_id: key.patient_id.clone(),
        side: key.side,
        month,
        extractor: extractor.into(),
        layer,
        fingerprint: fp.into(),
    }
}

fn atlas_key() -> KneeKey {
    KneeKey {
        patient_id: ATLAS_ID.into(),
        side: Side::Right,
    }
}

fn patch_extractor(f: &FeatureSection) -> PatchIntensity {
    PatchIntensity {
        patches: f.patches,
        sub: f.sub,
    }
}

/// Registration taps for every reg_pair example: (first, second) visit for
/// pairs, (atlas, scan) otherwise.
fn reg_pair_records(
    prep: &Prepared,
    stack: &RegStack,
    examples: &[LabeledExample],
    leaves: &BTreeSet<usize>,
    mut sink: impl FnMut(FeatureRecord) -> Result<()>,
) -> Result<()> {
    let fp = prep.plan.fingerprint();
    let layer = leaf_layer(leaves);
    let mut cache: BTreeMap<(KneeKey, u32), Volume> = BTreeMap::new();
    let atlas = match examples.iter().any(|e| e.months.len() < 2) {
        true => Some(prep.atlas_scan()?),
        false => None,
    };
    let mut done = BTreeSet::new();
    for e in examples {
        let key = e.key();
        let (moving_month, fixed_month) = match e.months.as_slice() {
            [a, b, ..] => (Some(*a), *b),
            [a] => (None, *a),
            [] => bail!("example {key} has no months"),
        };
        if !done.insert((key.clone(), moving_month, fixed_month)) {
            continue;
        }
        for m in moving_month.into_iter().chain([fixed_month]) {
            if let std::collections::btree_map::Entry::Vacant(slot) = cache.entry((key.clone(), m)) {
                slot.insert(prep.scan(&key, m)?);
            }
        }
        let fixed = &cache[&(key.clone(), fixed_month)];
        let moving = match moving_month {
            Some(m) => &cache[&(key.clone(), m)],
            None => atlas.as_ref().expect("atlas prepared for single-visit examples"),
        };
        let (shape, values) = reg_features(stack, moving, fixed, leaves)?;
        let k = feature_key(&key, fixed_month, TOY_AFFINE, reg_pair_layer(&layer, moving_month), &fp);
        sink(record(k, shape, values)?)?;
        // visits are consumed in order, so older ones can go
        cache.retain(|(k, _), _| *k == key);
    }
    Ok(())
}

pub fn features(cfg: &Config) -> Result<Run> {
    let mut run = open_run(cfg, "features")?;
    let data = Data::load(cfg)?;
    let pre_dir = upstream_dir(cfg, "preprocess")?;
    let examples = examples(cfg, &data.records)?;
    let scans = needed_scans(&examples);
    let atlas = if needs_atlas(cfg)? {
        Some(load_atlas(cfg)?)
    } else {
        None
    };
    let sections = &cfg.experiment.features;
    let stack = if sections.iter().any(|f| f.extractor == TOY_AFFINE) {
        Some(load_stack(cfg)?)
    } else {
        None
    };
    let store_dir = run.artifacts().join("features");
    if store_dir.exists() {
        fs::remove_dir_all(&store_dir)?;
    }
    let mut store = FeatureStore::open(&store_dir)?;
    for plan in cfg.plans()? {
        let fp = plan.fingerprint();
        let prep = Prepared::new(cfg, plan.clone(), &data, atlas.as_ref(), &pre_dir)?;
        let mut patches: Vec<PatchIntensity> = Vec::new();
        for p in sections
            .iter()
            .filter(|f| f.extractor == PATCH_INTENSITY)
            .map(patch_extractor)
        {
            if !patches.contains(&p) {
                patches.push(p);
            }
        }
        let mut count = 0;
        if !patches.is_empty() {
            for (key, months) in &scans {
                for &m in months {
                    let vol = prep.scan(key, m)?;
                    for p in &patches {
                        let k = feature_key(key, m, PATCH_INTENSITY, p.layer(), &fp);
                        store.insert(&record(k, p.shape(), p.extract(&vol)?)?)?;
                        count += 1;
                    }
                }
            }
            if let Some(atlas) = prep.atlas.map(|_| prep.atlas_scan()).transpose()? {
                for p in &patches {
                    let k = feature_key(&atlas_key(), 0, PATCH_INTENSITY, p.layer(), &fp);
                    store.insert(&record(k, p.shape(), p.extract(&atlas)?)?)?;
                }
            }
        }
        for f in sections.iter().filter(|f| f.extractor == TOY_AFFINE) {
            let leaves: BTreeSet<usize> = f.leaves.iter().copied().collect();
            let stack = stack.as_ref().expect("loaded above");
            reg_pair_records(&prep, stack, &examples, &leaves, |rec| {
                store.insert(&rec)?;
                count += 1;
                Ok(())
            })?;
        }
        run.log("extracted", json!({ "plan": plan.flags(), "records": count }))?;
    }
    Ok(run)
}

/// The run's own store, then an exported store.
struct Sources {
    own: FeatureStore,
    external: Option<FeatureStore>,
}

impl RecordSource for Sources {
    fn get(&self, key: &FeatureKey) -> icon_probe_core::Result<FeatureRecord> {
        match (self.own.contains(key), &self.external) {
            (false, Some(ext)) => ext.get(key),
            _ => self.own.get(key),
        }
    }
}

/// Layer name under which a feature section's records are stored.
pub fn section_layer(f: &FeatureSection) -> String {
    match f.extractor.as_str() {
        PATCH_INTENSITY => patch_extractor(f).layer(),
        TOY_AFFINE => leaf_layer(&f.leaves.iter().copied().collect()),
        _ => f.layer.clone().unwrap_or_default(),
    }
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

struct ProbeJob<'a> {
    experiment: String,
    flags: String,
    extractor: &'a str,
    mode: AssembleMode,
}

fn probe_one(
    run: &mut Run,
    cfg: &Config,
    job: ProbeJob,
    vectors: &[Vec<f64>],
    examples: &[LabeledExample],
) -> Result<ResultRow> {
    let task = cfg.task()?;
    let out = fit_and_score(vectors, examples, task.arity(), &cfg.probe)?;
    let metrics = standard_metrics(&out.test)?;
    let name = format!(
        "{}_{}_{}_{}.ipprb",
        file_safe(&job.experiment),
        file_safe(&job.flags),
        file_safe(job.extractor),
        job.mode.name()
    );
    let dir = run.artifacts().join("probes");
    fs::create_dir_all(&dir)?;
    write_checkpoint(&dir.join(&name), &out.probe, Some(&cfg.probe))?;
    run.log(
        "probe",
        json!({
            "experiment": job.experiment, "flags": job.flags, "extractor": job.extractor,
            "mode": job.mode.name(), "selected_iteration": out.log.selected_iteration,
            "selection": "best validation accuracy, earliest on ties",
            "final_train_loss": out.log.loss.last(), "metrics": metrics, "test_n": out.test.len(),
        }),
    )?;
    Ok(ResultRow {
        experiment: job.experiment,
        flags: job.flags,
        extractor: job.extractor.into(),
        mode: job.mode.name().into(),
        metrics,
        n: out.test.len(),
        registration: job.extractor == TOY_AFFINE,
    })
}

fn write_report(run: &Run, rows: &[ResultRow], layout: ReportLayout) -> Result<String> {
    let report = render_report(rows, layout)?;
    fs::write(run.artifacts().join("report.txt"), &report.text)?;
    fs::write(run.artifacts().join("rows.json"), serde_json::to_string_pretty(rows)?)?;
    Ok(report.text)
}

pub fn probe(cfg: &Config) -> Result<(Run, Vec<ResultRow>)> {
    let mut run = open_run(cfg, "probe")?;
    let data = Data::load(cfg)?;
    let examples = examples(cfg, &data.records)?;
    let feat_dir = upstream_dir(cfg, "features")?.join(ARTIFACTS).join("features");
    let src = Sources {
        own: FeatureStore::open(&feat_dir)?,
        external: cfg.data.features.as_deref().map(FeatureStore::open).transpose()?,
    };
    let mut rows = Vec::new();
    for plan in cfg.plans()? {
        let fp = plan.fingerprint();
        for f in &cfg.experiment.features {
            for m in &f.modes {
                let mode = AssembleMode::parse(m)?;
                let layer = section_layer(f);
                let atlas_rec = match mode {
                    AssembleMode::AtlasDiff => {
                        Some(src.get(&feature_key(&atlas_key(), 0, &f.extractor, layer.clone(), &fp))?)
                    }
                    _ => None,
                };
                let spec = AssembleSpec {
                    mode,
                    extractor: f.extractor.clone(),
                    layer,
                    fingerprint: fp.clone(),
                    atlas: atlas_rec.as_ref(),
                };
                let vectors: Vec<Vec<f64>> = assemble(&src, &examples, &spec)?
                    .into_iter()
                    .map(|a| a.vector)
                    .collect();
                let job = ProbeJob {
                    experiment: cfg.experiment.name.clone(),
                    flags: plan.flags(),
                    extractor: &f.extractor,
                    mode,
                };
                rows.push(probe_one(&mut run, cfg, job, &vectors, &examples)?);
            }
        }
    }
    write_report(&run, &rows, cfg.layout()?)?;
    Ok((run, rows))
}

pub fn report(cfg: &Config) -> Result<(Run, String, Vec<ResultRow>)> {
    let probe_dir = upstream_dir(cfg, "probe")?;
    let rows = read_record(&probe_dir)?.rows;
    let run = open_run(cfg, "report")?;
    let text = write_report(&run, &rows, cfg.layout()?)?;
    Ok((run, text, rows))
}

pub fn fig1_sweep(cfg: &Config) -> Result<(Run, String, Vec<ResultRow>)> {
    let mut run = open_run(cfg, "fig1-sweep")?;
    let data = Data::load(cfg)?;
    let pre_dir = upstream_dir(cfg, "preprocess")?;
    let examples = examples(cfg, &data.records)?;
    let atlas = if needs_atlas(cfg)? {
        Some(load_atlas(cfg)?)
    } else {
        None
    };
    let stack = load_stack(cfg)?;
    let mut rows = Vec::new();
    for plan in cfg.plans()? {
        let prep = Prepared::new(cfg, plan.clone(), &data, atlas.as_ref(), &pre_dir)?;
        for &leaf in &cfg.experiment.sweep_leaves {
            let leaves = BTreeSet::from([leaf]);
            let mut store: BTreeMap<FeatureKey, FeatureRecord> = BTreeMap::new();
            reg_pair_records(&prep, &stack, &examples, &leaves, |rec| {
                store.insert(rec.meta.key(), rec);
                Ok(())
            })?;
            let spec = AssembleSpec {
                mode: AssembleMode::RegPair,
                extractor: TOY_AFFINE.into(),
                layer: leaf_layer(&leaves),
                fingerprint: plan.fingerprint(),
                atlas: None,
            };
            let vectors: Vec<Vec<f64>> = assemble(&store, &examples, &spec)?
                .into_iter()
                .map(|a| a.vector)
                .collect();
            let job = ProbeJob {
                experiment: format!("{}/leaf{leaf}", cfg.experiment.name),
                flags: plan.flags(),
                extractor: TOY_AFFINE,
                mode: AssembleMode::RegPair,
            };
            rows.push(probe_one(&mut run, cfg, job, &vectors, &examples)?);
        }
    }
    let text = write_report(&run, &rows, ReportLayout::Fig1Sweep)?;
    Ok((run, text, rows))
}
