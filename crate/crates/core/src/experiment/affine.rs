//! Recovering known affine perturbations of a phantom with a trained
//! five-layer inverse-consistent stack.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{dice, threshold, warp, AffineTransform, Grid, Volume};
use crate::icon::{
    build_affine_stack, train_registration, AffineGenerator, FeatureSpec, RegStack, TrainConfig, TrainReport,
};
use crate::synth::{random_pose, Phantom, PoseJitter};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineRecoveryConfig {
    pub train_pairs: usize,
    pub eval_pairs: usize,
    /// Voxels per axis of the evaluation volumes.
    pub size: usize,
    pub max_rotation_deg: f64,
    pub max_scale: f64,
    /// Largest translation per axis as a fraction of the field of view.
    pub max_translation: f64,
    /// Feature length scale as a fraction of the half field of view.
    pub length_scale: f64,
    pub histogram_bins: usize,
    pub third_moments: bool,
    pub mask_threshold: f64,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for AffineRecoveryConfig {
    fn default() -> Self {
        AffineRecoveryConfig {
            train_pairs: 32,
            eval_pairs: 20,
            size: 48,
            max_rotation_deg: 15.0,
            max_scale: 0.1,
            max_translation: 0.1,
            length_scale: 0.3,
            histogram_bins: 8,
            third_moments: false,
            mask_threshold: 0.3,
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
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub dice: f64,
    pub matrix_error: f64,
    /// Mean absolute error of the 3×3 linear block.
    pub linear_error: f64,
    /// Mean absolute error of the translation column.
    pub translation_error: f64,
    pub dice_before: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineRecoveryReport {
    pub mean_dice: f64,
    pub mean_matrix_error: f64,
    pub mean_dice_before: f64,
    pub pairs: Vec<PairResult>,
    pub train: TrainReport,
}

/// Random rotation about a uniform axis, per-axis scaling and translation
/// in a field of view of half-width `half_fov`.
pub fn random_affine(rng: &mut impl Rng, cfg: &AffineRecoveryConfig, half_fov: f64) -> AffineTransform {
    random_pose(
        rng,
        &PoseJitter {
            max_rotation_deg: cfg.max_rotation_deg,
            max_scale: cfg.max_scale,
            max_translation: cfg.max_translation * 2.0 * half_fov,
        },
    )
}

/// Moving/fixed phantom pairs with their exact fixed-to-moving maps.
pub fn phantom_pairs(
    rng: &mut impl Rng,
    cfg: &AffineRecoveryConfig,
    grid: Grid,
    n: usize,
) -> Result<Vec<(Volume, Volume, AffineTransform)>> {
    let half = grid.extent()[0] / 2.0;
    let phantom = Phantom::reference(half);
    let fixed = phantom.render(grid)?;
    (0..n)
        .map(|_| {
            let t = random_affine(rng, cfg, half);
            Ok((phantom.render_moved(grid, &t)?, fixed.clone(), t))
        })
        .collect()
}

pub fn evaluation_grid(size: usize) -> Result<Grid> {
    Grid::centered([size; 3], 2.0 / size as f64)
}

/// Mean absolute difference over the upper 3×4 block.
pub fn matrix_error(a: &AffineTransform, b: &AffineTransform) -> f64 {
    let (x, y) = (a.upper_block(), b.upper_block());
    x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / 12.0
}

fn block_error(a: &AffineTransform, b: &AffineTransform, translation: bool) -> f64 {
    let (x, y) = (a.upper_block(), b.upper_block());
    let picked: Vec<f64> = (0..12)
        .filter(|i| (i % 4 == 3) == translation)
        .map(|i| (x[i] - y[i]).abs())
        .collect();
    picked.iter().sum::<f64>() / picked.len() as f64
}

pub fn affine_recovery(cfg: &AffineRecoveryConfig) -> Result<(RegStack, AffineRecoveryReport)> {
    let grid = evaluation_grid(cfg.size)?;
    let half = grid.extent()[0] / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train: Vec<(Volume, Volume)> = phantom_pairs(&mut rng, cfg, grid, cfg.train_pairs)?
        .into_iter()
        .map(|(a, b, _)| (a, b))
        .collect();
    let eval = phantom_pairs(&mut rng, cfg, grid, cfg.eval_pairs)?;

    let spec = FeatureSpec {
        histogram_bins: cfg.histogram_bins,
        third_moments: cfg.third_moments,
        ..FeatureSpec::with_length_scale(cfg.length_scale * half)
    };
    let gens = (0..5)
        .map(|_| AffineGenerator::zeros(spec.clone()))
        .collect::<Result<_>>()?;
    let mut stack = build_affine_stack(gens)?;
    let train_report = train_registration(&mut stack, &train, &cfg.train)?;

    let mut pairs = Vec::with_capacity(eval.len());
    for (moving, fixed, truth) in &eval {
        let t = stack.transform(moving, fixed)?;
        let affine = t.as_affine().cloned().expect("affine stacks produce affine maps");
        let target = threshold(fixed, cfg.mask_threshold);
        let warped = threshold(&warp(moving, &t, fixed.grid()), cfg.mask_threshold);
        let before = threshold(moving, cfg.mask_threshold);
        pairs.push(PairResult {
            dice: dice(&warped, &target)?,
            matrix_error: matrix_error(&affine, truth),
            linear_error: block_error(&affine, truth, false),
            translation_error: block_error(&affine, truth, true),
            dice_before: dice(&before, &target)?,
        });
    }
    let n = pairs.len().max(1) as f64;
    let report = AffineRecoveryReport {
        mean_dice: pairs.iter().map(|p| p.dice).sum::<f64>() / n,
        mean_matrix_error: pairs.iter().map(|p| p.matrix_error).sum::<f64>() / n,
        mean_dice_before: pairs.iter().map(|p| p.dice_before).sum::<f64>() / n,
        pairs,
        train: train_report,
    };
    Ok((stack, report))
}
