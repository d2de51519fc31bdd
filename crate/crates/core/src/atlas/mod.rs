//! Population template construction by iterative registration, averaging
//! and drift correction.

use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::clinical::{ClinicalRecord, KneeKey};
use crate::error::{Error, Result};
use crate::geometry::{logm, read_volume, warp, write_volume, AffineTransform, MapTransform, Volume};
use crate::icon::RegStack;

pub const DEFAULT_MAX_SUBJECTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtlasConfig {
    pub iterations: usize,
    /// Fraction of the mean transform removed per iteration.
    pub step: f64,
    /// Stop once the mean displacement falls below this many voxels.
    pub tolerance_voxels: f64,
    #[serde(default)]
    pub init: AtlasInit,
}

/// Starting template.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtlasInit {
    /// Voxel mean of the population.
    #[default]
    Mean,
    /// One subject's image.
    Subject(usize),
}

impl Default for AtlasConfig {
    fn default() -> Self {
        AtlasConfig {
            iterations: 10,
            step: 0.5,
            tolerance_voxels: 0.05,
            init: AtlasInit::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AtlasBuildState {
    pub template: Volume,
    pub iteration: usize,
    /// Mean displacement, in mm, of the population-mean transform over the
    /// template grid at the last iteration.
    pub mean_displacement_norm: f64,
    pub history: Vec<f64>,
}

/// Knees with grade 0 and pain score 0 at enrollment, sorted, at most
/// `max_subjects` of them.
pub fn select_healthy(records: &[ClinicalRecord], max_subjects: usize) -> Vec<KneeKey> {
    let mut keys: Vec<KneeKey> = records
        .iter()
        .filter(|r| r.month == 0 && r.klg == 0 && r.womac == 0)
        .map(ClinicalRecord::key)
        .collect();
    keys.sort();
    keys.dedup();
    keys.truncate(max_subjects);
    keys
}

/// Voxel mean computed as a running average so that identical inputs
/// reproduce themselves exactly.
fn running_mean<'a>(vols: impl Iterator<Item = &'a Volume>) -> Option<Volume> {
    let mut acc: Option<(Volume, usize)> = None;
    for v in vols {
        acc = Some(match acc {
            None => (v.clone(), 1),
            Some((m, k)) => {
                let k = k + 1;
                let data = m
                    .data()
                    .iter()
                    .zip(v.data())
                    .map(|(a, b)| a + (b - a) / k as f64)
                    .collect();
                (Volume::from_parts_unchecked(*m.grid(), data), k)
            }
        });
    }
    acc.map(|(m, _)| m)
}

fn generator_of(t: &MapTransform, subject: usize) -> Result<Matrix4<f64>> {
    let a = t.as_affine().ok_or_else(|| Error::RegistrationFailed {
        subject,
        message: "atlas backend must produce affine maps".into(),
    })?;
    match a.generator() {
        Some(g) => Ok(*g),
        None => logm(a.matrix()).map_err(|e| Error::RegistrationFailed {
            subject,
            message: e.to_string(),
        }),
    }
}

fn mean_displacement(t: &AffineTransform, template: &Volume) -> f64 {
    let grid = template.grid();
    let total: f64 = grid
        .points()
        .map(|p| {
            let q = t.apply(p);
            ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2)).sqrt()
        })
        .sum();
    total / grid.len() as f64
}

/// Iterative template normalization. Each iteration registers every image to the template,
/// averages the warped images, and resamples that average through a
/// fraction of the inverse mean transform.
pub fn build_atlas(images: &[Volume], backend: &RegStack, cfg: &AtlasConfig) -> Result<AtlasBuildState> {
    let first = images
        .first()
        .ok_or_else(|| Error::EmptyInput("atlas population is empty".into()))?;
    if cfg.iterations == 0 || !(cfg.step > 0.0 && cfg.step <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "atlas iterations {} / step {}",
            cfg.iterations, cfg.step
        )));
    }
    let grid = *first.grid();
    if let Some(i) = images.iter().position(|v| v.grid() != &grid) {
        return Err(Error::GridMismatch(format!("atlas subject {i} is on a different grid")));
    }
    let min_spacing = grid.spacing.iter().copied().fold(f64::INFINITY, f64::min);

    let mut template = match cfg.init {
        AtlasInit::Mean => running_mean(images.iter()).expect("non-empty"),
        AtlasInit::Subject(i) => images
            .get(i)
            .ok_or_else(|| Error::InvalidConfig(format!("atlas init subject {i} out of range")))?
            .clone(),
    };
    let mut history = Vec::new();
    for _ in 0..cfg.iterations {
        let mut warped = Vec::with_capacity(images.len());
        let mut mean_gen = Matrix4::zeros();
        for (subject, img) in images.iter().enumerate() {
            let t = backend
                .transform(img, &template)
                .map_err(|e| Error::RegistrationFailed {
                    subject,
                    message: e.to_string(),
                })?;
            mean_gen += generator_of(&t, subject)?;
            warped.push(warp(img, &t, &grid));
        }
        mean_gen /= images.len() as f64;
        let candidate = running_mean(warped.iter()).expect("non-empty");

        let drift = AffineTransform::from_generator(&mean_gen);
        let norm = mean_displacement(&drift, &candidate);
        let correction = AffineTransform::from_generator(&(mean_gen * -cfg.step));
        template = if correction.is_identity() {
            candidate
        } else {
            warp(&candidate, &MapTransform::Affine(correction), &grid)
        };
        history.push(norm);
        if norm < cfg.tolerance_voxels * min_spacing {
            break;
        }
    }
    Ok(AtlasBuildState {
        template,
        iteration: history.len(),
        mean_displacement_norm: *history.last().expect("at least one iteration"),
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtlasSidecar {
    pub subjects: Vec<String>,
    pub iterations: usize,
    pub final_norm: f64,
    pub history: Vec<f64>,
    pub config: AtlasConfig,
}

fn sidecar_path(volume_path: &Path) -> std::path::PathBuf {
    volume_path.with_extension("json")
}

/// Writes the template as a native raw volume and a JSON sidecar next to it
/// (same stem, `.json`).
pub fn write_atlas(path: &Path, state: &AtlasBuildState, subjects: &[String], cfg: &AtlasConfig) -> Result<()> {
    write_volume(&state.template, path)?;
    let sidecar = AtlasSidecar {
        subjects: subjects.to_vec(),
        iterations: state.iteration,
        final_norm: state.mean_displacement_norm,
        history: state.history.clone(),
        config: cfg.clone(),
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(&side, text).map_err(|e| Error::io_at(&side, e))
}

pub fn read_atlas(path: &Path) -> Result<(Volume, Option<AtlasSidecar>)> {
    let vol = read_volume(path)?;
    let side = sidecar_path(path);
    let sidecar = match std::fs::read(&side) {
        Ok(bytes) => Some(serde_json::from_slice(&bytes)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::io_at(&side, e)),
    };
    Ok((vol, sidecar))
}
