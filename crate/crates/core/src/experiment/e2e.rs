//! Pose sensitivity of probe features on a synthetic longitudinal cohort.
//!
//! Joint space narrowing is predicted from image pairs twice, once from the
//! raw scans and once after affine alignment to a population atlas. Pooled
//! patch intensities depend on where the joint lands in the field of view;
//! registration taps of a same-knee pair should not.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::probing::{fit_and_score, standard_metrics};
use crate::atlas::{build_atlas, select_healthy, AtlasConfig, DEFAULT_MAX_SUBJECTS};
use crate::clinical::{assign_splits, pair_examples, split_patients, LabeledExample, Task};
use crate::error::{Error, Result};
use crate::eval::ResultRow;
use crate::geometry::{Grid, Volume};
use crate::icon::{build_affine_stack, train_registration, AffineGenerator, FeatureSpec, RegStack, TrainConfig};
use crate::pipeline::{
    assemble, leaf_layer, preprocess, reg_features, reg_pair_layer, Alignment, AssembleMode, AssembleSpec, FeatureKey,
    FeatureMeta, FeatureRecord, PatchIntensity, PreprocessPlan, PATCH_INTENSITY, TOY_AFFINE,
};
use crate::probe::ProbeConfig;
use crate::synth::{generate_cohort, Cohort, CohortConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct E2eConfig {
    pub cohort: CohortConfig,
    /// Baseline pairs of different knees used to train the stack.
    pub train_pairs: usize,
    pub train: TrainConfig,
    /// Feature length scale as a fraction of the half field of view.
    pub length_scale: f64,
    pub atlas: AtlasConfig,
    pub atlas_max_subjects: usize,
    pub patches: PatchIntensity,
    pub leaves: BTreeSet<usize>,
    pub probe: ProbeConfig,
    pub split_seed: u64,
    /// Flag strings of the two plans being compared, raw first.
    pub plans: [String; 2],
}

impl Default for E2eConfig {
    fn default() -> Self {
        E2eConfig {
            cohort: CohortConfig::default(),
            train_pairs: 32,
            train: TrainConfig {
                epochs: 10,
                resolution: Some(16),
                batch_size: 4,
                optimizer: crate::probe::AdamWConfig {
                    lr: 0.02,
                    weight_decay: 0.0,
                    ..Default::default()
                },
                fd_step: 1e-4,
                seed: 0,
            },
            length_scale: 1.0,
            atlas: AtlasConfig::default(),
            atlas_max_subjects: DEFAULT_MAX_SUBJECTS,
            patches: PatchIntensity::default(),
            leaves: [1, 2, 3].into(),
            probe: ProbeConfig::default(),
            split_seed: 0,
            plans: ["none".into(), "A".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct E2eReport {
    pub rows: Vec<ResultRow>,
    /// Test AUC of patch features under the aligned plan minus the raw plan.
    pub patch_auc_gain: f64,
    /// Same difference for registration pair taps.
    pub reg_auc_change: f64,
    pub atlas_subjects: usize,
    pub atlas_history: Vec<f64>,
    pub examples: usize,
    pub positives: usize,
    pub seconds: BTreeMap<String, f64>,
}

/// `count` ordered pairs of distinct indices below `n`.
pub fn random_pairs(n: usize, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        return Err(Error::EmptyInput("pairs need two images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let a = rng.random_range(0..n);
            (a, (a + rng.random_range(1..n)) % n)
        })
        .collect())
}

/// Untrained five-layer stack whose features are scaled to `grid`.
pub fn fresh_affine_stack(grid: &Grid, length_scale: f64) -> Result<RegStack> {
    let half = grid.extent()[0] / 2.0;
    let spec = FeatureSpec::with_length_scale(length_scale * half);
    let gens = (0..5)
        .map(|_| AffineGenerator::zeros(spec.clone()))
        .collect::<Result<_>>()?;
    build_affine_stack(gens)
}

/// Trains a five-layer affine stack on baseline scans of random knee pairs.
pub fn train_knee_stack(cohort: &Cohort, cfg: &E2eConfig) -> Result<RegStack> {
    let month = cohort.config.months[0];
    let mut pairs = Vec::with_capacity(cfg.train_pairs);
    for (a, b) in random_pairs(cohort.knees.len(), cfg.train_pairs, cohort.config.seed ^ 0x5EED)? {
        pairs.push((cohort.render(a, month)?, cohort.render(b, month)?));
    }
    let mut stack = fresh_affine_stack(&cohort.config.grid()?, cfg.length_scale)?;
    train_registration(&mut stack, &pairs, &cfg.train)?;
    Ok(stack)
}

fn meta(ex_key: &FeatureKey, shape: Vec<usize>) -> FeatureMeta {
    FeatureMeta {
        patient_id: ex_key.patient_id.clone(),
        side: ex_key.side,
        timepoint_months: ex_key.month,
        extractor: ex_key.extractor.clone(),
        layer: ex_key.layer.clone(),
        preprocess_fingerprint: ex_key.fingerprint.clone(),
        shape,
        extra: BTreeMap::new(),
    }
}

type Store = BTreeMap<FeatureKey, FeatureRecord>;

/// Extracts patch features for every scan and registration taps for every
/// labeled pair under one plan.
#[allow(clippy::too_many_arguments)]
fn extract_plan(
    cohort: &Cohort,
    examples: &[LabeledExample],
    plan: &PreprocessPlan,
    atlas: &Volume,
    stack: &RegStack,
    cfg: &E2eConfig,
    store: &mut Store,
) -> Result<()> {
    let fp = plan.fingerprint();
    let reg_layer = leaf_layer(&cfg.leaves);
    for (index, knee) in cohort.knees.iter().enumerate() {
        let key = knee.key();
        let mut pre = BTreeMap::new();
        for &m in &cohort.config.months {
            let img = cohort.render(index, m)?;
            let out = preprocess(&img, Some(atlas), plan, Alignment::Stack(stack))?;
            let k = FeatureKey {
                patient_id: key.patient_id.clone(),
                side: key.side,
                month: m,
                extractor: PATCH_INTENSITY.into(),
                layer: cfg.patches.layer(),
                fingerprint: fp.clone(),
            };
            let rec = FeatureRecord::new(meta(&k, cfg.patches.shape()), cfg.patches.extract(&out.volume)?)?;
            store.insert(k, rec);
            pre.insert(m, out.volume);
        }
        for ex in examples.iter().filter(|e| e.key() == key) {
            let (m1, m2) = (ex.months[0], ex.months[1]);
            let (shape, values) = reg_features(stack, &pre[&m1], &pre[&m2], &cfg.leaves)?;
            let k = FeatureKey {
                patient_id: key.patient_id.clone(),
                side: key.side,
                month: m2,
                extractor: TOY_AFFINE.into(),
                layer: reg_pair_layer(&reg_layer, Some(m1)),
                fingerprint: fp.clone(),
            };
            store.insert(k.clone(), FeatureRecord::new(meta(&k, shape), values)?);
        }
    }
    Ok(())
}

fn probe_row(
    vectors: &[Vec<f64>],
    examples: &[LabeledExample],
    cfg: &E2eConfig,
    flags: &str,
    extractor: &str,
    mode: AssembleMode,
) -> Result<ResultRow> {
    let out = fit_and_score(vectors, examples, 2, &cfg.probe)?;
    Ok(ResultRow {
        experiment: "pose".into(),
        flags: flags.into(),
        extractor: extractor.into(),
        mode: mode.name().into(),
        metrics: standard_metrics(&out.test)?,
        n: out.test.len(),
        registration: extractor == TOY_AFFINE,
    })
}

pub fn pose_sensitivity(cfg: &E2eConfig) -> Result<E2eReport> {
    let mut seconds = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, seconds: &mut BTreeMap<String, f64>| {
        seconds.insert(name.to_string(), clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };

    let cohort = generate_cohort(&cfg.cohort)?;
    let stack = train_knee_stack(&cohort, cfg)?;
    lap("stack", &mut seconds);

    let healthy = select_healthy(&cohort.records, cfg.atlas_max_subjects);
    if healthy.is_empty() {
        return Err(Error::EmptyInput("no healthy baseline knees for the atlas".into()));
    }
    let month0 = cohort.config.months[0];
    let atlas_images = healthy
        .iter()
        .map(|k| {
            let i = cohort
                .knees
                .iter()
                .position(|t| &t.key() == k)
                .expect("selected from cohort");
            cohort.render(i, month0)
        })
        .collect::<Result<Vec<_>>>()?;
    let atlas = build_atlas(&atlas_images, &stack, &cfg.atlas)?;
    lap("atlas", &mut seconds);

    let mut examples = pair_examples(&cohort.records, Task::ProgJsw)?;
    let ids: Vec<String> = cohort.knees.iter().map(|k| k.patient_id.clone()).collect();
    assign_splits(&mut examples, &split_patients(&ids, cfg.split_seed))?;

    let mut rows = Vec::new();
    let mut store = Store::new();
    for flags in &cfg.plans {
        let plan = PreprocessPlan::from_flags(flags)?;
        extract_plan(&cohort, &examples, &plan, &atlas.template, &stack, cfg, &mut store)?;
        lap(&format!("extract {}", plan.flags()), &mut seconds);
        let src = &store;

        let spec = AssembleSpec {
            mode: AssembleMode::PairConcat,
            extractor: PATCH_INTENSITY.into(),
            layer: cfg.patches.layer(),
            fingerprint: plan.fingerprint(),
            atlas: None,
        };
        let vectors: Vec<Vec<f64>> = assemble(src, &examples, &spec)?.into_iter().map(|a| a.vector).collect();
        rows.push(probe_row(
            &vectors,
            &examples,
            cfg,
            &plan.flags(),
            PATCH_INTENSITY,
            spec.mode,
        )?);

        let spec = AssembleSpec {
            mode: AssembleMode::RegPair,
            extractor: TOY_AFFINE.into(),
            layer: leaf_layer(&cfg.leaves),
            fingerprint: plan.fingerprint(),
            atlas: None,
        };
        let vectors: Vec<Vec<f64>> = assemble(src, &examples, &spec)?.into_iter().map(|a| a.vector).collect();
        rows.push(probe_row(
            &vectors,
            &examples,
            cfg,
            &plan.flags(),
            TOY_AFFINE,
            spec.mode,
        )?);
        lap(&format!("probe {}", plan.flags()), &mut seconds);
    }

    let auc = |extractor: &str, i: usize| rows[2 * i + usize::from(extractor == TOY_AFFINE)].metrics["auc"];
    Ok(E2eReport {
        patch_auc_gain: auc(PATCH_INTENSITY, 1) - auc(PATCH_INTENSITY, 0),
        reg_auc_change: auc(TOY_AFFINE, 1) - auc(TOY_AFFINE, 0),
        atlas_subjects: healthy.len(),
        atlas_history: atlas.history,
        examples: examples.len(),
        positives: examples.iter().filter(|e| e.label == 1).count(),
        seconds,
        rows,
    })
}
