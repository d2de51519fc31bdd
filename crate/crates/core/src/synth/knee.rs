//! Longitudinal knee phantoms: two bones separated by a joint space that
//! narrows over time in progressors, seen through a per-knee pose.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::phantom::{Ellipsoid, Phantom};
use super::pose::{random_pose, PoseJitter};
use crate::clinical::{ClinicalRecord, KneeKey, Side};
use crate::error::{Error, Result};
use crate::geometry::{AffineTransform, Grid, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub patients: usize,
    /// Both knees per patient when true, otherwise right knees only.
    pub both_knees: bool,
    pub months: Vec<u32>,
    /// Voxels per axis.
    pub size: usize,
    /// Voxel spacing in mm.
    pub spacing: f64,
    pub progressor_fraction: f64,
    /// Joint space narrowing of progressors, mm per year.
    pub progressor_rate: [f64; 2],
    pub stable_rate: [f64; 2],
    pub baseline_jsw: [f64; 2],
    pub pose: PoseJitter,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            patients: 64,
            both_knees: true,
            months: vec![0, 12, 24, 36, 48],
            size: 32,
            spacing: 2.0,
            progressor_fraction: 0.5,
            progressor_rate: [0.2, 0.45],
            stable_rate: [0.0, 0.08],
            baseline_jsw: [4.0, 6.0],
            pose: PoseJitter {
                max_rotation_deg: 10.0,
                max_scale: 0.06,
                max_translation: 8.0,
            },
            noise: 0.02,
            seed: 0,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [self.progressor_rate, self.stable_rate, self.baseline_jsw];
        if self.patients == 0 || self.months.is_empty() || self.size < 8 || !(self.spacing > 0.0) {
            return Err(Error::InvalidConfig(
                "cohort needs patients, months, size >= 8 and positive spacing".into(),
            ));
        }
        if ranges.iter().any(|r| !(r[0] >= 0.0 && r[0] <= r[1]))
            || !(0.0..=1.0).contains(&self.progressor_fraction)
            || self.noise < 0.0
        {
            return Err(Error::InvalidConfig("cohort ranges out of order".into()));
        }
        let mut m = self.months.clone();
        m.sort_unstable();
        m.dedup();
        if m.len() != self.months.len() {
            return Err(Error::InvalidConfig("duplicate months".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::centered([self.size; 3], self.spacing)
    }
}

/// Per-knee shape factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KneeAnatomy {
    pub femur_scale: f64,
    pub tibia_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KneeTruth {
    pub patient_id: String,
    pub side: Side,
    pub progressor: bool,
    pub baseline_jsw_mm: f64,
    pub rate_mm_per_year: f64,
    /// Upper 3×4 block of the map from anatomical to scanner coordinates.
    pub pose: [f64; 12],
    pub anatomy: KneeAnatomy,
    pub womac_offset: f64,
}

const MIN_JSW: f64 = 0.5;

impl KneeTruth {
    pub fn key(&self) -> KneeKey {
        KneeKey {
            patient_id: self.patient_id.clone(),
            side: self.side,
        }
    }

    pub fn jsw_at(&self, month: u32) -> f64 {
        (self.baseline_jsw_mm - self.rate_mm_per_year * month as f64 / 12.0).max(MIN_JSW)
    }

    pub fn pose_transform(&self) -> AffineTransform {
        let mut m = nalgebra::Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = self.pose[r * 4 + c];
            }
        }
        AffineTransform::from_matrix(m).expect("pose block is invertible")
    }

    /// The knee in anatomical coordinates at a given joint space width.
    pub fn phantom(&self, jsw: f64) -> Phantom {
        let lateral = match self.side {
            Side::Right => 1.0,
            Side::Left => -1.0,
        };
        let (f, t) = (self.anatomy.femur_scale, self.anatomy.tibia_scale);
        let half = jsw / 2.0;
        let e = Ellipsoid::axis_aligned;
        Phantom {
            parts: vec![
                e([0.0, 0.0, 0.0], [28.0, 24.0, 44.0], 0.2),
                e([0.0, 0.0, half + 12.0 * f], [20.0 * f, 16.0 * f, 12.0 * f], 0.6),
                e([0.0, 0.0, -half - 10.0 * t], [19.0 * t, 15.0 * t, 10.0 * t], 0.6),
                e([0.0, 17.0 * f, half + 10.0 * f], [7.0, 3.5, 8.0], 0.5),
                e([14.0 * lateral * t, -4.0, -half - 18.0 * t], [4.0, 4.0, 6.0], 0.5),
            ],
            edge: 0.06,
        }
    }
}

/// Kellgren-Lawrence grade implied by the joint space width.
pub fn klg_from_jsw(jsw: f64) -> u8 {
    match jsw {
        j if j >= 5.0 => 0,
        j if j >= 4.4 => 1,
        j if j >= 3.8 => 2,
        j if j >= 3.2 => 3,
        _ => 4,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub config: CohortConfig,
    pub knees: Vec<KneeTruth>,
    pub records: Vec<ClinicalRecord>,
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

pub fn generate_cohort(cfg: &CohortConfig) -> Result<Cohort> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sides: &[Side] = if cfg.both_knees {
        &[Side::Left, Side::Right]
    } else {
        &[Side::Right]
    };
    let mut knees = Vec::new();
    for p in 0..cfg.patients {
        for &side in sides {
            let progressor = rng.random_bool(cfg.progressor_fraction);
            let rate = uniform(
                &mut rng,
                if progressor {
                    cfg.progressor_rate
                } else {
                    cfg.stable_rate
                },
            );
            let baseline = uniform(&mut rng, cfg.baseline_jsw);
            let pose = random_pose(&mut rng, &cfg.pose).upper_block();
            let anatomy = KneeAnatomy {
                femur_scale: rng.random_range(0.92..1.08),
                tibia_scale: rng.random_range(0.92..1.08),
            };
            let womac_offset = rng.random_range(-2.0..2.0);
            knees.push(KneeTruth {
                patient_id: format!("S{p:04}"),
                side,
                progressor,
                baseline_jsw_mm: baseline,
                rate_mm_per_year: rate,
                pose,
                anatomy,
                womac_offset,
            });
        }
    }
    let mut records = Vec::new();
    for k in &knees {
        for &m in &cfg.months {
            let jsw = k.jsw_at(m);
            let klg = klg_from_jsw(jsw);
            let womac = (2.5 * klg as f64 + k.womac_offset).round().clamp(0.0, 20.0) as u8;
            records.push(ClinicalRecord {
                patient_id: k.patient_id.clone(),
                side: k.side,
                month: m,
                klg,
                womac,
                jsw_mm: jsw,
            });
        }
    }
    Ok(Cohort {
        config: cfg.clone(),
        knees,
        records,
    })
}

impl Cohort {
    pub fn knee(&self, key: &KneeKey) -> Option<&KneeTruth> {
        self.knees.iter().find(|k| &k.key() == key)
    }

    /// Scanner-space image of knee `index` at `month`, with noise seeded by
    /// (cohort seed, knee, month).
    pub fn render(&self, index: usize, month: u32) -> Result<Volume> {
        let knee = self
            .knees
            .get(index)
            .ok_or_else(|| Error::OutOfRange(format!("knee index {index}")))?;
        let grid = self.config.grid()?;
        let clean = knee
            .phantom(knee.jsw_at(month))
            .render_moved(grid, &knee.pose_transform())?;
        if self.config.noise == 0.0 {
            return Ok(clean);
        }
        let seed = self
            .config
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((index as u64) << 16 | month as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, self.config.noise).expect("finite noise level");
        let data = clean.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
        Volume::new(grid, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clinical::prog_jsw;

    fn small() -> CohortConfig {
        CohortConfig {
            patients: 1,
            both_knees: false,
            months: vec![0],
            size: 16,
            spacing: 4.0,
            ..Default::default()
        }
    }

    #[test]
    fn single_knee_single_timepoint() {
        let c = generate_cohort(&small()).unwrap();
        assert_eq!(c.records.len(), 1);
        assert_eq!(c.knees.len(), 1);
        let v = c.render(0, 0).unwrap();
        assert_eq!(v.shape(), [16; 3]);
        assert_eq!(c.records[0].jsw_mm, c.knees[0].jsw_at(0));
    }

    #[test]
    fn constructed_progressor_is_labeled() {
        let mut c = generate_cohort(&small()).unwrap();
        let k = &mut c.knees[0];
        k.baseline_jsw_mm = 4.0;
        k.rate_mm_per_year = 0.6;
        assert!((k.jsw_at(12) - 3.4).abs() < 1e-12);
        let rec = |m: u32| ClinicalRecord {
            patient_id: k.patient_id.clone(),
            side: k.side,
            month: m,
            klg: klg_from_jsw(k.jsw_at(m)),
            womac: 0,
            jsw_mm: k.jsw_at(m),
        };
        assert!(prog_jsw(&rec(0), &rec(12)).unwrap());
    }

    #[test]
    fn seeded_runs_are_identical() {
        let cfg = CohortConfig {
            patients: 2,
            size: 12,
            spacing: 5.0,
            ..Default::default()
        };
        let a = generate_cohort(&cfg).unwrap();
        let b = generate_cohort(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.render(3, 24).unwrap(), b.render(3, 24).unwrap());
        assert_eq!(a.records.len(), 2 * 2 * 5);
    }

    #[test]
    fn narrowing_moves_bone_into_the_gap() {
        let cfg = CohortConfig {
            noise: 0.0,
            pose: PoseJitter {
                max_rotation_deg: 0.0,
                max_scale: 0.0,
                max_translation: 0.0,
            },
            ..small()
        };
        let c = generate_cohort(&cfg).unwrap();
        let k = &c.knees[0];
        let wide = k.phantom(5.0).value([0.0, 0.0, 0.0]);
        let narrow = k.phantom(1.0).value([0.0, 0.0, 0.0]);
        assert!(narrow > wide + 0.1, "{wide} {narrow}");
    }

    #[test]
    fn grades_follow_width() {
        assert_eq!(klg_from_jsw(5.5), 0);
        assert_eq!(klg_from_jsw(4.0), 2);
        assert_eq!(klg_from_jsw(1.0), 4);
        assert!(generate_cohort(&CohortConfig {
            patients: 0,
            ..Default::default()
        })
        .is_err());
    }
}
