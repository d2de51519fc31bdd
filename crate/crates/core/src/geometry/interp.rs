//! Trilinear sampling and pull-back warping.
//!
//! Points outside the hull of voxel centers sample as zero and are reported
//! as outside. Continuous indices within 1e-9 of a grid node snap onto it,
//! so sampling at voxel centers returns the stored value exactly.

use super::transform::MapTransform;
use super::volume::{Grid, Volume};

const SNAP: f64 = 1e-9;

/// Lower corner index and fractional weight per axis for a point, or `None`
/// when the point falls outside the grid hull.
#[inline]
pub(crate) fn locate(grid: &Grid, p: [f64; 3]) -> Option<[(usize, usize, f64); 3]> {
    locate_index(&grid.shape, grid.continuous_index(p))
}

/// `locate` on a continuous index. Avoids libm rounding calls: every
/// coordinate that survives the range check is non-negative, so truncation
/// is floor.
#[inline]
fn locate_index(shape: &[usize; 3], c: [f64; 3]) -> Option<[(usize, usize, f64); 3]> {
    let mut out = [(0usize, 0usize, 0.0f64); 3];
    for a in 0..3 {
        let n = shape[a];
        let mut x = c[a];
        let max = (n - 1) as f64;
        // also rejects NaN
        if !(x >= -SNAP && x <= max + SNAP) {
            return None;
        }
        let nearest = (x + 0.5) as usize;
        if (x - nearest as f64).abs() < SNAP {
            x = nearest as f64;
        }
        if n == 1 {
            out[a] = (0, 0, 0.0);
            continue;
        }
        let i0 = (x as usize).min(n - 2);
        out[a] = (i0, i0 + 1, x - i0 as f64);
    }
    Some(out)
}

/// Blends the eight corner values fetched through `at(linear_index)`.
/// Corners with zero weight are never read, which keeps node samples exact.
#[inline]
pub(crate) fn blend(grid: &Grid, loc: &[(usize, usize, f64); 3], at: impl Fn(usize) -> f64) -> f64 {
    let [(x0, x1, fx), (y0, y1, fy), (z0, z1, fz)] = *loc;
    let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
    let row = |y: usize, z: usize| {
        let v0 = at(grid.index(x0, y, z));
        if fx == 0.0 {
            v0
        } else {
            lerp(v0, at(grid.index(x1, y, z)), fx)
        }
    };
    let plane = |z: usize| {
        let r0 = row(y0, z);
        if fy == 0.0 {
            r0
        } else {
            lerp(r0, row(y1, z), fy)
        }
    };
    let p0 = plane(z0);
    if fz == 0.0 {
        p0
    } else {
        lerp(p0, plane(z1), fz)
    }
}

/// Trilinear sample at a physical point. Returns `(0.0, false)` outside the
/// grid hull.
pub fn trilinear_sample(vol: &Volume, p: [f64; 3]) -> (f64, bool) {
    match locate(vol.grid(), p) {
        Some(loc) => {
            let data = vol.data();
            (blend(vol.grid(), &loc, |i| data[i]), true)
        }
        None => (0.0, false),
    }
}

/// Pull-back warp: `out(x) = vol(t(x))` for every voxel center `x` of
/// `out_grid`.
pub fn warp(vol: &Volume, t: &MapTransform, out_grid: &Grid) -> Volume {
    let data = vol.data();
    let grid = vol.grid();
    let values = match t.as_affine() {
        Some(a) if a.is_identity() && out_grid == grid => data.to_vec(),
        Some(a) => {
            // continuous source index as an affine function of the output index
            let m = a.matrix();
            let mut lin = [[0.0; 4]; 3];
            for r in 0..3 {
                for c in 0..3 {
                    lin[r][c] = m[(r, c)] * out_grid.spacing[c] / grid.spacing[r];
                }
                let offset: f64 = (0..3).map(|c| m[(r, c)] * out_grid.origin[c]).sum();
                lin[r][3] = (offset + m[(r, 3)] - grid.origin[r]) / grid.spacing[r];
            }
            let [nx, ny, nz] = out_grid.shape;
            let mut out = Vec::with_capacity(out_grid.len());
            for k in 0..nz {
                let kf = k as f64;
                for j in 0..ny {
                    let jf = j as f64;
                    let row: [f64; 3] = std::array::from_fn(|r| lin[r][1] * jf + lin[r][2] * kf + lin[r][3]);
                    for i in 0..nx {
                        let f = i as f64;
                        let c = [row[0] + lin[0][0] * f, row[1] + lin[1][0] * f, row[2] + lin[2][0] * f];
                        out.push(locate_index(&grid.shape, c).map_or(0.0, |loc| blend(grid, &loc, |i| data[i])));
                    }
                }
            }
            out
        }
        None => out_grid
            .points()
            .map(|p| {
                let q = t.apply(p);
                locate(grid, q).map_or(0.0, |loc| blend(grid, &loc, |i| data[i]))
            })
            .collect(),
    };
    Volume::from_parts_unchecked(*out_grid, values)
}
