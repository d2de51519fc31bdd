//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line (written
//! straight to stderr so it shows without `--nocapture`) and then asserts.

use std::io::Write;
use std::time::{Duration, Instant};

use icon_probe_core::atlas::{build_atlas, AtlasConfig, AtlasInit};
use icon_probe_core::clinical::{
    assign_splits, enumerate_pairs, klg_class, pain_label, prog_jsw, single_examples, split_patients, ClinicalRecord,
    Side, Split, Task,
};
use icon_probe_core::eval::{accuracy, auc_binary, average_precision, confusion_matrix, f1_binary, ScoredSet};
use icon_probe_core::experiment::{affine_recovery, pose_sensitivity, AffineRecoveryConfig, E2eConfig};
use icon_probe_core::geometry::{expm, AffineTransform, Grid, MapTransform, Volume};
use icon_probe_core::icon::{
    build_affine_stack, ds, ic_affine, ts, tsc_unchecked, AffineGenerator, FeatureSpec, RegPredictor, RegStack,
};
use icon_probe_core::probe::{
    predict_class, predict_proba, probe_loss_grad, train_probe, LinearProbe, ProbeConfig, Standardization,
};
use icon_probe_core::synth::{random_pose, Phantom, PoseJitter};
use nalgebra::Matrix4;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(name: &str, pass: bool, detail: String) {
    let line = format!("acceptance {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{name}: {detail}");
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (
        e < limit,
        format!("{:.1}s (limit {}s)", e.as_secs_f64(), limit.as_secs()),
    )
}

/// Truncated power series, the reference for the matrix exponential.
fn series_exp(g: &Matrix4<f64>, terms: usize) -> Matrix4<f64> {
    let mut sum = Matrix4::identity();
    let mut term = Matrix4::identity();
    for k in 1..terms {
        term = term * g / k as f64;
        sum += term;
    }
    sum
}

fn max_abs(m: &Matrix4<f64>) -> f64 {
    m.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Induced infinity norm: largest absolute row sum.
fn inf_norm(m: &Matrix4<f64>) -> f64 {
    (0..4)
        .map(|r| (0..4).map(|c| m[(r, c)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn random_generator(rng: &mut impl Rng, linear: f64, translation: f64) -> Matrix4<f64> {
    let mut g = Matrix4::zeros();
    for r in 0..3 {
        for c in 0..4 {
            let s = if c == 3 { translation } else { linear };
            g[(r, c)] = rng.random_range(-s..s);
        }
    }
    g
}

#[test]
fn inverse_consistency_of_random_stacks() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let grid = Grid::centered([24; 3], 2.0).unwrap();
    let half = grid.extent()[0] / 2.0;
    let phantom = Phantom::reference(half);
    let jitter = PoseJitter {
        max_rotation_deg: 15.0,
        max_scale: 0.1,
        max_translation: 0.1 * 2.0 * half,
    };
    let spec = FeatureSpec::with_length_scale(half);
    let (mut worst, mut moved) = (0.0f64, f64::INFINITY);
    for _ in 0..50 {
        let a = phantom.render_moved(grid, &random_pose(&mut rng, &jitter)).unwrap();
        let b = phantom.render_moved(grid, &random_pose(&mut rng, &jitter)).unwrap();
        let gens = (0..5)
            .map(|_| AffineGenerator::random(spec.clone(), 0.05, &mut rng).unwrap())
            .collect();
        let stack = build_affine_stack(gens).unwrap();
        let ab = stack.transform(&a, &b).unwrap();
        let ba = stack.transform(&b, &a).unwrap();
        let (ab, ba) = (ab.as_affine().unwrap().matrix(), ba.as_affine().unwrap().matrix());
        worst = worst.max(inf_norm(&(ab * ba - Matrix4::identity())));
        moved = moved.min(max_abs(&(ab - Matrix4::identity())));
    }
    let (fast, time) = within(t0, Duration::from_secs(30));
    report(
        "inverse-consistency",
        worst < 1e-8 && moved > 1e-3 && fast,
        format!("max ||AB*BA - I||inf = {worst:.2e} (< 1e-8), smallest map {moved:.2e} from identity, {time}"),
    );
}

fn constant(m: &Matrix4<f64>) -> RegPredictor {
    RegPredictor::Imported(MapTransform::Affine(AffineTransform::from_matrix(*m).unwrap()))
}

#[test]
fn operator_algebra_matches_matrix_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let grid = Grid::centered([12; 3], 2.0).unwrap();
    let a = Phantom::reference(12.0).render(grid).unwrap();
    let b = Phantom::reference(12.0)
        .render_moved(grid, &AffineTransform::translation([1.5, -1.0, 0.5]))
        .unwrap();
    let mut worst = 0.0f64;
    for case in 0..200 {
        let g: Vec<Matrix4<f64>> = (0..3).map(|_| random_generator(&mut rng, 0.2, 3.0)).collect();
        let m: Vec<Matrix4<f64>> = g.iter().map(|g| series_exp(g, 30)).collect();
        let half = |i: usize| series_exp(&(g[i] * 0.5), 30);
        let half_inv = |i: usize| series_exp(&(g[i] * -0.5), 30);
        let (predictor, oracle) = match case % 4 {
            0 => (ts(constant(&m[0]), constant(&m[1])), m[0] * m[1]),
            1 => (ds(constant(&m[0])), m[0]),
            2 => (
                tsc_unchecked(constant(&m[0]), constant(&m[1])),
                half(0) * m[1] * half_inv(0),
            ),
            _ => (
                ts(ds(constant(&m[0])), tsc_unchecked(constant(&m[1]), constant(&m[2]))),
                m[0] * half(1) * m[2] * half_inv(1),
            ),
        };
        let t = predictor.transform(&a, &b).unwrap();
        for _ in 0..100 {
            let p = [0; 3].map(|_| rng.random_range(-20.0..20.0));
            let q = t.apply(p);
            let r = oracle * nalgebra::Vector4::new(p[0], p[1], p[2], 1.0);
            for i in 0..3 {
                worst = worst.max((q[i] - r[i]).abs());
            }
        }
    }
    let (fast, time) = within(t0, Duration::from_secs(30));
    report(
        "operator-algebra",
        worst < 1e-9 && fast,
        format!("max pointwise gap over 200 cases x 100 points = {worst:.2e} (< 1e-9), {time}"),
    );
}

#[test]
fn expm_matches_series_and_half_power() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut rel, mut half) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let g = random_generator(&mut rng, 1.0, 1.0);
        let l1: f64 = g.iter().map(|x| x.abs()).sum();
        let g = g * (rng.random_range(0.0..=2.0) / l1);
        let e = expm(&g);
        let oracle = series_exp(&g, 30);
        rel = rel.max(max_abs(&(e - oracle)) / max_abs(&oracle));
        let h = expm(&(g * 0.5));
        half = half.max(max_abs(&(h * h - e)));
    }
    report(
        "expm",
        rel < 1e-10 && half < 1e-10,
        format!(
            "max relative error vs series = {rel:.2e} (< 1e-10), max |expm(g/2)^2 - expm(g)| = {half:.2e} (< 1e-10)"
        ),
    );
}

#[test]
fn affine_recovery_on_phantom_pairs() {
    let t0 = Instant::now();
    let cfg = AffineRecoveryConfig::default();
    let (_, r) = affine_recovery(&cfg).unwrap();
    let (fast, time) = within(t0, Duration::from_secs(300));
    report(
        "affine-recovery",
        r.pairs.len() == 20 && cfg.size == 48 && r.mean_dice >= 0.90 && r.mean_matrix_error < 0.05 && fast,
        format!(
            "{} pairs at {}^3: mean Dice {:.4} (>= 0.90, before {:.4}), mean matrix error {:.4} (< 0.05), {time}",
            r.pairs.len(),
            cfg.size,
            r.mean_dice,
            r.mean_dice_before,
            r.mean_matrix_error
        ),
    );
}

fn random_probe(rng: &mut impl Rng, classes: usize, dim: usize) -> LinearProbe {
    let w = (0..classes * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b = (0..classes).map(|_| rng.random_range(-1.0..1.0)).collect();
    LinearProbe::from_parts(w, b, Standardization::identity(dim)).unwrap()
}

fn probe_gradient_error(rng: &mut impl Rng) -> f64 {
    let classes = rng.random_range(2..=5);
    let dim = rng.random_range(1..=8);
    let n = rng.random_range(1..=16);
    let probe = random_probe(rng, classes, dim);
    let xs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let ys: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let (_, grad) = probe_loss_grad(&probe, &xs, &ys).unwrap();
    let loss = |p: &LinearProbe| probe_loss_grad(p, &xs, &ys).unwrap().0;
    let h = 1e-5;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for i in 0..classes * dim {
        let (mut a, mut b) = (probe.clone(), probe.clone());
        a.weights_mut()[i] += h;
        b.weights_mut()[i] -= h;
        numeric.push((loss(&a) - loss(&b)) / (2.0 * h));
        analytic.push(grad.weights[i]);
    }
    for i in 0..classes {
        let (mut a, mut b) = (probe.clone(), probe.clone());
        a.bias_mut()[i] += h;
        b.bias_mut()[i] -= h;
        numeric.push((loss(&a) - loss(&b)) / (2.0 * h));
        analytic.push(grad.bias[i]);
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-12)
}

fn separable_train_accuracy() -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    while xs.len() < 200 {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
        let s = x[0] - 0.7 * x[1] + 0.2 * x[2];
        if s.abs() < 0.3 {
            continue;
        }
        ys.push(usize::from(s > 0.0));
        xs.push(x);
    }
    let cfg = ProbeConfig {
        iterations: 2000,
        lr: 1e-3,
        ..ProbeConfig::default()
    };
    let (probe, log) = train_probe(&xs, &ys, 2, None, &cfg).unwrap();
    let correct = xs
        .iter()
        .zip(&ys)
        .filter(|(x, y)| predict_class(&probe, x).unwrap() == **y)
        .count();
    (correct as f64 / xs.len() as f64, *log.iterations.last().unwrap())
}

/// Test AUC of a probe trained on labels shuffled away from the features.
fn permuted_label_auc(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let n = 4000;
    let dim = 8;
    let xs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut ys: Vec<usize> = xs.iter().map(|x| usize::from(x[0] + x[1] > 0.0)).collect();
    ys.shuffle(&mut rng);
    let (train_x, test_x) = xs.split_at(n / 2);
    let (train_y, test_y) = ys.split_at(n / 2);
    let cfg = ProbeConfig {
        seed,
        ..ProbeConfig::default()
    };
    let (probe, _) = train_probe(train_x, train_y, 2, None, &cfg).unwrap();
    let scores: Vec<f64> = test_x.iter().map(|x| predict_proba(&probe, x).unwrap()[1]).collect();
    let labels: Vec<bool> = test_y.iter().map(|&y| y == 1).collect();
    auc_binary(&ScoredSet::from_positive(&scores, &labels).unwrap()).unwrap()
}

#[test]
fn probe_protocol() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let grad_err = (0..50).map(|_| probe_gradient_error(&mut rng)).fold(0.0, f64::max);
    let (train_acc, iters) = separable_train_accuracy();
    let aucs: Vec<f64> = (0..5).map(permuted_label_auc).collect();
    let null_ok = aucs.iter().all(|a| (0.45..=0.55).contains(a));
    report(
        "probe-protocol",
        grad_err < 1e-5 && train_acc == 1.0 && iters <= 2000 && null_ok,
        format!(
            "max gradient rel. error {grad_err:.2e} (< 1e-5); separable train accuracy {train_acc} after {iters} iterations at lr 1e-3; permuted-label test AUC {:?} (each in [0.45, 0.55])",
            aucs.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    );
}

fn mann_whitney(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut twice_num, mut den) = (0u64, 0u64);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                den += 1;
                if scores[i] > scores[j] {
                    twice_num += 2;
                } else if scores[i] == scores[j] {
                    twice_num += 1;
                }
            }
        }
    }
    twice_num as f64 / (2 * den) as f64
}

/// Precision at every recall step, summed with the recall increments.
fn step_sum_ap(scores: &[f64], positive: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // keys are zero-padded positions, so ties fall back to position
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let (mut tp, mut prev_recall, mut ap) = (0.0, 0.0, 0.0);
    for (k, &i) in order.iter().enumerate() {
        if positive[i] {
            tp += 1.0;
        }
        let recall = tp / n_pos;
        let precision = tp / (k + 1) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

fn random_binary(rng: &mut impl Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    // coarse score levels force ties
    let levels = rng.random_range(2..=20);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    labels[0] = true;
    labels[n - 1] = false;
    let scores = (0..n)
        .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
        .collect();
    (scores, labels)
}

#[test]
fn metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut auc_mismatch = 0;
    let mut ap_err = 0.0f64;
    let mut count_mismatch = 0;
    for _ in 0..500 {
        let n = rng.random_range(2..=300);
        let (scores, labels) = random_binary(&mut rng, n);
        let set = ScoredSet::from_positive(&scores, &labels).unwrap();
        if n <= 200 && auc_binary(&set).unwrap() != mann_whitney(&scores, &labels) {
            auc_mismatch += 1;
        }
        ap_err = ap_err.max((average_precision(&set).unwrap() - step_sum_ap(&scores, &labels)).abs());

        // confusion counting at the argmax decision (ties go to class 0)
        let predicted: Vec<bool> = scores.iter().map(|&p| p > 1.0 - p).collect();
        let count = |y: bool, p: bool| {
            labels
                .iter()
                .zip(&predicted)
                .filter(|&(&l, &q)| l == y && q == p)
                .count()
        };
        let (tp, fp, fun, tn) = (
            count(true, true),
            count(false, true),
            count(true, false),
            count(false, false),
        );
        let cm = confusion_matrix(&set);
        let acc = (tp + tn) as f64 / n as f64;
        let f1 = if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fun) as f64
        };
        if cm != vec![vec![tn, fp], vec![fun, tp]]
            || (accuracy(&set).unwrap() - acc).abs() > 1e-12
            || (f1_binary(&set).unwrap() - f1).abs() > 1e-12
        {
            count_mismatch += 1;
        }
    }
    report(
        "metric-oracles",
        auc_mismatch == 0 && ap_err < 1e-12 && count_mismatch == 0,
        format!("AUC != pair oracle in {auc_mismatch} sets; max AP gap {ap_err:.2e} (< 1e-12); F1/ACC/confusion mismatches {count_mismatch} of 500"),
    );
}

fn rec(id: &str, side: Side, month: u32, klg: u8, womac: u8, jsw: f64) -> ClinicalRecord {
    ClinicalRecord {
        patient_id: id.into(),
        side,
        month,
        klg,
        womac,
        jsw_mm: jsw,
    }
}

#[test]
fn label_rules() {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    check("womac 4 -> no pain", !pain_label(4).unwrap());
    check("womac 5 -> pain", pain_label(5).unwrap());
    let merged: Vec<usize> = (0..=4).map(|k| klg_class(k).unwrap()).collect();
    check("klg 0,1 -> 0 and 2,3,4 -> 1,2,3", merged == vec![0, 0, 1, 2, 3]);
    let r = |m, j| rec("p", Side::Left, m, 2, 0, j);
    check(
        "jsw drop 0.5 over 12 months -> progression",
        prog_jsw(&r(0, 4.0), &r(12, 3.5)).unwrap(),
    );
    check(
        "jsw drop 0.4 over 12 months -> none",
        !prog_jsw(&r(0, 4.0), &r(12, 3.6)).unwrap(),
    );
    check("6-month interval rejected", prog_jsw(&r(0, 4.0), &r(6, 3.0)).is_err());
    let visits = vec![r(0, 4.0), r(6, 3.0), r(12, 3.5)];
    let pairs = enumerate_pairs(&visits, Task::ProgJsw);
    check(
        "6-month pairs excluded from enumeration",
        pairs.len() == 1 && pairs[0].0.month == 0 && pairs[0].1.month == 12,
    );
    report(
        "label-rules",
        failures.is_empty(),
        if failures.is_empty() {
            "all boundary fixtures hold".into()
        } else {
            format!("failed: {failures:?}")
        },
    );
}

#[test]
fn split_contract() {
    let ids: Vec<String> = (0..2244).map(|i| format!("P{i:05}")).collect();
    let splits = split_patients(&ids, 7);
    let count = |s: Split| splits.values().filter(|&&v| v == s).count();
    let counts = (count(Split::Train), count(Split::Val), count(Split::Test));
    let deterministic = splits == split_patients(&ids, 7) && splits != split_patients(&ids, 8);

    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut incoherent = 0;
    for seed in 0..1000 {
        let n = rng.random_range(1..=60);
        let mut records = Vec::new();
        for p in 0..n {
            let id = format!("C{}", rng.random_range(0..10_000) * 100 + p);
            for side in [Side::Left, Side::Right] {
                if rng.random_bool(0.85) || side == Side::Left {
                    records.push(rec(&id, side, 0, rng.random_range(0..=4), 0, 4.0));
                }
            }
        }
        let mut examples = single_examples(&records, Task::Klg4).unwrap();
        let pids: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
        assign_splits(&mut examples, &split_patients(&pids, seed)).unwrap();
        let mut by_patient = std::collections::BTreeMap::new();
        for e in &examples {
            let s = e.split.unwrap();
            if *by_patient.entry(e.patient_id.clone()).or_insert(s) != s {
                incoherent += 1;
            }
        }
    }
    report(
        "split-contract",
        counts == (1122, 280, 842) && deterministic && incoherent == 0,
        format!("2244 ids -> {counts:?} (want (1122, 280, 842)); seed-fixed determinism {deterministic}; knees split from their patient in {incoherent} of 1000 cohorts"),
    );
}

fn centroid_backend(length_scale: f64) -> RegStack {
    let g = AffineGenerator::centroid_translation(FeatureSpec::with_length_scale(length_scale)).unwrap();
    RegStack::new(ic_affine(g))
}

fn blob(grid: Grid, c: [f64; 3], sigma: f64) -> Volume {
    Volume::from_fn(grid, |p| {
        let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
        (-r2 / (2.0 * sigma * sigma)).exp()
    })
    .unwrap()
}

#[test]
fn atlas_fixtures() {
    // identical population
    let grid = Grid::centered([16; 3], 1.0).unwrap();
    let img = blob(grid, [1.3, -0.7, 0.4], 2.5);
    let state = build_atlas(&vec![img.clone(); 4], &centroid_backend(8.0), &AtlasConfig::default()).unwrap();
    let fixed_point = state.template == img && state.mean_displacement_norm == 0.0;

    // two impulses placed symmetrically about the centre voxel
    let grid = Grid::centered([21; 3], 1.0).unwrap();
    let impulse = |ijk: [usize; 3]| {
        let mut v = Volume::zeros(grid);
        v.set(ijk, 1.0).unwrap();
        v
    };
    let pair = [impulse([6, 10, 10]), impulse([14, 10, 10])];
    let state = build_atlas(&pair, &centroid_backend(10.0), &AtlasConfig::default()).unwrap();
    let c = state.template.centroid().unwrap();
    let offset = c.iter().map(|x| x.abs()).fold(0.0, f64::max) / grid.spacing[0];

    // seeded population of shifted blobs
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let grid = Grid::centered([20; 3], 1.0).unwrap();
    let images: Vec<Volume> = (0..6)
        .map(|_| blob(grid, [0; 3].map(|_| rng.random_range(-3.0..3.0)), 1.5))
        .collect();
    let cfg = AtlasConfig {
        iterations: 8,
        tolerance_voxels: 0.0,
        init: AtlasInit::Subject(0),
        ..AtlasConfig::default()
    };
    let history = build_atlas(&images, &centroid_backend(10.0), &cfg).unwrap().history;
    let monotone = history.len() >= 3 && history[1..].windows(2).all(|w| w[1] <= w[0]);

    report(
        "atlas",
        fixed_point && offset < 0.5 && monotone,
        format!(
            "identical population fixed point {fixed_point}; two-impulse centroid {offset:.3} voxel from midpoint (< 0.5); drift history {:?} non-increasing after iteration 2: {monotone}",
            history.iter().map(|h| (h * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn end_to_end_alignment_trend() {
    let t0 = Instant::now();
    let cfg = E2eConfig::default();
    let r = pose_sensitivity(&cfg).unwrap();
    let (fast, time) = within(t0, Duration::from_secs(15 * 60));
    let months = cfg.cohort.months.len();
    report(
        "end-to-end",
        cfg.cohort.patients == 64 && months == 5 && r.patch_auc_gain >= 0.05 && r.reg_auc_change.abs() <= 0.03 && fast,
        format!(
            "{} patients x {months} visits; pooled-intensity AUC gain none -> A {:+.4} (>= 0.05); reg_pair AUC change {:+.4} (|.| <= 0.03); {time}",
            cfg.cohort.patients, r.patch_auc_gain, r.reg_auc_change
        ),
    );
}
