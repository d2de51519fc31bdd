use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Crop box used when none is given: central 60% in-plane, 40% axially.
pub const DEFAULT_CROP_BOX: [f64; 6] = [0.2, 0.8, 0.2, 0.8, 0.3, 0.7];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Normalization {
    #[default]
    None,
    /// Clip at the given percentiles, then rescale to [0, 1].
    Percentile { low: f64, high: f64 },
}

impl Normalization {
    pub fn percentile() -> Self {
        Normalization::Percentile { low: 0.1, high: 99.9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessPlan {
    /// "A": affine registration to the atlas.
    pub affine_align: bool,
    /// "D": resampling through an imported dense transform to the atlas.
    pub nonparam_align: bool,
    /// "C": crop to `crop_box`.
    pub roi_crop: bool,
    /// Fractional `[x0, x1, y0, y1, z0, z1]`.
    pub crop_box: [f64; 6],
    pub normalize: Normalization,
}

impl Default for PreprocessPlan {
    fn default() -> Self {
        PreprocessPlan {
            affine_align: false,
            nonparam_align: false,
            roi_crop: false,
            crop_box: DEFAULT_CROP_BOX,
            normalize: Normalization::None,
        }
    }
}

impl PreprocessPlan {
    /// Plan from a flag string such as "A+C", "D", "AC" or "none".
    pub fn from_flags(flags: &str) -> Result<Self> {
        let mut plan = PreprocessPlan::default();
        let trimmed = flags.trim();
        if !(trimmed.is_empty() || trimmed.eq_ignore_ascii_case("none")) {
            for c in trimmed.chars().filter(|c| !matches!(c, '+' | ',' | ' ')) {
                match c.to_ascii_uppercase() {
                    'A' => plan.affine_align = true,
                    'D' => plan.nonparam_align = true,
                    'C' => plan.roi_crop = true,
                    other => return Err(Error::InvalidPlan(format!("unknown flag '{other}'"))),
                }
            }
        }
        plan.validate()?;
        Ok(plan)
    }

    /// Canonical flag string: "A", "D+C", ... or "none".
    pub fn flags(&self) -> String {
        let mut parts = Vec::new();
        if self.affine_align {
            parts.push("A");
        }
        if self.nonparam_align {
            parts.push("D");
        }
        if self.roi_crop {
            parts.push("C");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    pub fn needs_atlas(&self) -> bool {
        self.affine_align || self.nonparam_align
    }

    pub fn validate(&self) -> Result<()> {
        if self.affine_align && self.nonparam_align {
            return Err(Error::InvalidPlan(
                "affine and nonparametric alignment are alternatives".into(),
            ));
        }
        let b = &self.crop_box;
        for axis in 0..3 {
            let (lo, hi) = (b[2 * axis], b[2 * axis + 1]);
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
                return Err(Error::DegenerateCrop(*b));
            }
        }
        if let Normalization::Percentile { low, high } = self.normalize {
            if !(0.0..100.0).contains(&low) || !(low < high && high <= 100.0) {
                return Err(Error::InvalidPlan(format!("percentiles {low}..{high}")));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("plan serializes");
        hex::encode(Sha256::digest(&json))
    }
}
