use super::interp::warp;
use super::transform::MapTransform;
use super::volume::{Grid, Volume};
use crate::error::{Error, Result};

/// Block average by `factor` along every axis. Trailing voxels that do not
/// fill a whole block are dropped; spacing is multiplied by `factor` and the
/// origin moves to the center of the first block.
pub fn avg_pool(vol: &Volume, factor: usize) -> Result<Volume> {
    let shape = vol.shape();
    if factor == 0 || shape.iter().any(|&n| n < factor) {
        return Err(Error::DegeneratePool { shape, factor });
    }
    let g = vol.grid();
    let out_shape = shape.map(|n| n / factor);
    let spacing = g.spacing.map(|s| s * factor as f64);
    let origin = [0, 1, 2].map(|a| g.origin[a] + 0.5 * (factor as f64 - 1.0) * g.spacing[a]);
    let out_grid = Grid::new(out_shape, spacing, origin)?;
    let norm = 1.0 / (factor * factor * factor) as f64;
    let mut out = Vec::with_capacity(out_grid.len());
    for k in 0..out_shape[2] {
        for j in 0..out_shape[1] {
            for i in 0..out_shape[0] {
                let mut acc = 0.0;
                for dz in 0..factor {
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += vol.get(i * factor + dx, j * factor + dy, k * factor + dz);
                        }
                    }
                }
                out.push(acc * norm);
            }
        }
    }
    Ok(Volume::from_parts_unchecked(out_grid, out))
}

/// Resamples onto an `n³` grid covering the same field of view: block
/// averaging when every axis divides evenly, trilinear otherwise.
pub fn resample_cubic(vol: &Volume, n: usize) -> Result<Volume> {
    let shape = vol.shape();
    if shape == [n; 3] {
        return Ok(vol.clone());
    }
    if n > 0 && shape.iter().all(|&s| s % n == 0 && s / n == shape[0] / n) {
        return avg_pool(vol, shape[0] / n);
    }
    let grid = vol.grid().resampled([n; 3])?;
    Ok(warp(vol, &MapTransform::identity(), &grid))
}

/// Sørensen–Dice overlap `2|A∩B| / (|A| + |B|)` of two binary masks; 1.0
/// when both are empty.
pub fn dice(a: &Volume, b: &Volume) -> Result<f64> {
    if a.grid() != b.grid() {
        return Err(Error::GridMismatch(format!(
            "dice on grids {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut inter = 0usize;
    let mut size_a = 0usize;
    let mut size_b = 0usize;
    for (index, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        for value in [x, y] {
            if value != 0.0 && value != 1.0 {
                return Err(Error::NonBinaryMask { index, value });
            }
        }
        let (x, y) = (x == 1.0, y == 1.0);
        size_a += x as usize;
        size_b += y as usize;
        inter += (x && y) as usize;
    }
    if size_a + size_b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (size_a + size_b) as f64)
}

/// Binary mask `value >= threshold`.
pub fn threshold(vol: &Volume, threshold: f64) -> Volume {
    let data = vol
        .data()
        .iter()
        .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
        .collect();
    Volume::from_parts_unchecked(*vol.grid(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: [usize; 3]) -> Grid {
        Grid::new(n, [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn constant_pools_to_constant() {
        let v = Volume::filled(grid([4, 6, 8]), 3.0);
        let p = avg_pool(&v, 2).unwrap();
        assert_eq!(p.shape(), [2, 3, 4]);
        assert!(p.data().iter().all(|&x| x == 3.0));
        assert_eq!(p.grid().spacing, [2.0; 3]);
        assert_eq!(p.grid().origin, [0.5; 3]);
    }

    #[test]
    fn block_mean() {
        let v = Volume::new(grid([2, 2, 2]), (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(avg_pool(&v, 2).unwrap().data(), &[3.5]);
    }

    #[test]
    fn odd_shapes_floor() {
        let v = Volume::zeros(grid([5, 5, 5]));
        assert_eq!(avg_pool(&v, 2).unwrap().shape(), [2, 2, 2]);
        assert!(matches!(
            avg_pool(&Volume::zeros(grid([1, 4, 4])), 2),
            Err(Error::DegeneratePool { .. })
        ));
    }

    #[test]
    fn dice_cases() {
        let g = grid([4, 2, 1]);
        let a = Volume::new(g, vec![1., 1., 1., 1., 0., 0., 0., 0.]).unwrap();
        let b = Volume::new(g, vec![0., 0., 1., 1., 1., 1., 0., 0.]).unwrap();
        let c = Volume::new(g, vec![0., 0., 0., 0., 0., 0., 1., 1.]).unwrap();
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        let empty = Volume::zeros(g);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert!(dice(&a, &Volume::zeros(grid([2, 2, 2]))).is_err());
        let half = Volume::filled(g, 0.5);
        assert!(matches!(dice(&a, &half), Err(Error::NonBinaryMask { .. })));
    }

    #[test]
    fn resample_keeps_field_of_view() {
        let v = Volume::filled(Grid::centered([6, 6, 6], 1.0).unwrap(), 1.0);
        let r = resample_cubic(&v, 3).unwrap();
        assert_eq!(r.grid().extent(), v.grid().extent());
        let r = resample_cubic(&v, 4).unwrap();
        assert_eq!(r.grid().extent(), v.grid().extent());
    }
}
