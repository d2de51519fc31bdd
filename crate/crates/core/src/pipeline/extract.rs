use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Volume;
use crate::icon::{extract_reg_features, RegStack};

pub const PATCH_INTENSITY: &str = "patch-intensity";
pub const TOY_AFFINE: &str = "toy-affine";

/// Stand-in for a convolutional bottleneck: the volume is cut into
/// `patches³` cells, each cell is one channel, and its spatial map holds
/// the mean intensity of `sub³` blocks within the cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchIntensity {
    pub patches: usize,
    pub sub: usize,
}

impl Default for PatchIntensity {
    fn default() -> Self {
        PatchIntensity { patches: 4, sub: 2 }
    }
}

fn bounds(n: usize, parts: usize, i: usize) -> (usize, usize) {
    (i * n / parts, (i + 1) * n / parts)
}

impl PatchIntensity {
    pub fn layer(&self) -> String {
        format!("patches{}x{}", self.patches, self.sub)
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.patches.pow(3), self.sub, self.sub, self.sub]
    }

    pub fn extract(&self, vol: &Volume) -> Result<Vec<f32>> {
        let shape = vol.shape();
        let cells = self.patches * self.sub;
        if self.patches == 0 || self.sub == 0 || shape.iter().any(|&n| n < cells) {
            return Err(Error::DimensionMismatch(format!(
                "volume {shape:?} too small for {} patches of {} blocks",
                self.patches, self.sub
            )));
        }
        let (p, s) = (self.patches, self.sub);
        let mut out = Vec::with_capacity(p.pow(3) * s.pow(3));
        for pz in 0..p {
            for py in 0..p {
                for px in 0..p {
                    for sz in 0..s {
                        for sy in 0..s {
                            for sx in 0..s {
                                let (x0, x1) = bounds(shape[0], cells, px * s + sx);
                                let (y0, y1) = bounds(shape[1], cells, py * s + sy);
                                let (z0, z1) = bounds(shape[2], cells, pz * s + sz);
                                let mut sum = 0.0;
                                for k in z0..z1 {
                                    for j in y0..y1 {
                                        for i in x0..x1 {
                                            sum += vol.get(i, j, k);
                                        }
                                    }
                                }
                                let count = (x1 - x0) * (y1 - y0) * (z1 - z0);
                                out.push((sum / count as f64) as f32);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Layer name for a leaf selection, e.g. "leaves1-3".
pub fn leaf_layer(leaves: &BTreeSet<usize>) -> String {
    let ids: Vec<String> = leaves.iter().map(usize::to_string).collect();
    format!("leaves{}", ids.join("-"))
}

/// Registration-network taps for (moving, fixed) as a `(n, 1)` tensor.
pub fn reg_features(
    stack: &RegStack,
    moving: &Volume,
    fixed: &Volume,
    leaves: &BTreeSet<usize>,
) -> Result<(Vec<usize>, Vec<f32>)> {
    let tap = extract_reg_features(stack, moving, fixed, leaves)?;
    let values: Vec<f32> = tap.concat().into_iter().map(|v| v as f32).collect();
    if values.is_empty() {
        return Err(Error::EmptyInput("selected leaves produced no features".into()));
    }
    Ok((vec![values.len(), 1], values))
}
