use crate::error::{Error, Result};
use crate::geometry::{warp, Grid, MapTransform, Volume};
use crate::icon::RegStack;

use super::plan::{Normalization, PreprocessPlan};

/// Source of the atlas alignment.
#[derive(Clone, Copy, Debug)]
pub enum Alignment<'a> {
    None,
    /// Registration network run on (image, atlas).
    Stack(&'a RegStack),
    /// Precomputed map from atlas space into the image.
    Imported(&'a MapTransform),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub volume: Volume,
    /// Map used to resample the image onto the atlas grid, if any.
    pub transform: Option<MapTransform>,
    pub fingerprint: String,
}

/// Index range `[lo, hi)` of each axis covered by a fractional box.
pub fn crop_ranges(shape: [usize; 3], crop_box: &[f64; 6]) -> Result<[(usize, usize); 3]> {
    let mut out = [(0, 0); 3];
    for axis in 0..3 {
        let n = shape[axis] as f64;
        let lo = (crop_box[2 * axis] * n).round() as usize;
        let hi = ((crop_box[2 * axis + 1] * n).round() as usize).min(shape[axis]);
        if hi <= lo {
            return Err(Error::DegenerateCrop(*crop_box));
        }
        out[axis] = (lo, hi);
    }
    Ok(out)
}

pub fn crop(vol: &Volume, crop_box: &[f64; 6]) -> Result<Volume> {
    let ranges = crop_ranges(vol.shape(), crop_box)?;
    let src = vol.grid();
    let shape = ranges.map(|(lo, hi)| hi - lo);
    let grid = Grid::new(shape, src.spacing, src.point([ranges[0].0, ranges[1].0, ranges[2].0]))?;
    let mut data = Vec::with_capacity(grid.len());
    for k in ranges[2].0..ranges[2].1 {
        for j in ranges[1].0..ranges[1].1 {
            for i in ranges[0].0..ranges[0].1 {
                data.push(vol.get(i, j, k));
            }
        }
    }
    Volume::new(grid, data)
}

/// Linear-interpolated percentile of sorted values, `q` in [0, 100].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn normalize(vol: &Volume, policy: Normalization) -> Result<Volume> {
    match policy {
        Normalization::None => Ok(vol.clone()),
        Normalization::Percentile { low, high } => {
            let mut sorted = vol.data().to_vec();
            sorted.sort_by(f64::total_cmp);
            let (lo, hi) = (percentile(&sorted, low), percentile(&sorted, high));
            if hi <= lo {
                return Ok(Volume::zeros(*vol.grid()));
            }
            vol.map(|v| (v.clamp(lo, hi) - lo) / (hi - lo))
        }
    }
}

/// Alignment onto the atlas grid, then crop, then intensity normalization.
pub fn preprocess(
    image: &Volume,
    atlas: Option<&Volume>,
    plan: &PreprocessPlan,
    alignment: Alignment,
) -> Result<Preprocessed> {
    plan.validate()?;
    let mut transform = None;
    let mut vol = if plan.needs_atlas() {
        let atlas = atlas.ok_or(Error::MissingAtlas)?;
        let t = match (plan.affine_align, alignment) {
            (true, Alignment::Stack(stack)) => stack.transform(image, atlas)?,
            (true, Alignment::Imported(t)) => t.clone(),
            (true, Alignment::None) => {
                return Err(Error::InvalidPlan(
                    "affine alignment needs a registration backend".into(),
                ))
            }
            (false, Alignment::Imported(t)) => t.clone(),
            (false, _) => return Err(Error::MissingTransform),
        };
        let out = warp(image, &t, atlas.grid());
        transform = Some(t);
        out
    } else {
        image.clone()
    };
    if plan.roi_crop {
        vol = crop(&vol, &plan.crop_box)?;
    }
    vol = normalize(&vol, plan.normalize)?;
    Ok(Preprocessed {
        volume: vol,
        transform,
        fingerprint: plan.fingerprint(),
    })
}
