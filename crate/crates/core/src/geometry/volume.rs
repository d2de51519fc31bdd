use crate::error::{Error, Result};

/// Sampling lattice of a volume: voxel counts, spacing (mm/voxel) and the
/// physical position of voxel (0, 0, 0) in mm. Voxel data is stored with x
/// varying fastest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let grid = Grid { shape, spacing, origin };
        grid.validate()?;
        Ok(grid)
    }

    /// Grid of `shape` with isotropic `spacing` whose center sits at the
    /// physical origin.
    pub fn centered(shape: [usize; 3], spacing: f64) -> Result<Self> {
        let origin = [0, 1, 2].map(|a| -0.5 * (shape[a] as f64 - 1.0) * spacing);
        Grid::new(shape, [spacing; 3], origin)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::InvalidGrid(format!(
                "shape components must be >= 1, got {:?}",
                self.shape
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive and finite, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "origin must be finite, got {:?}",
                self.origin
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.shape[0] * (j + self.shape[1] * k)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.shape[0];
        let ny = self.shape[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// Physical position (mm) of the voxel center at integer index `ijk`.
    #[inline]
    pub fn point(&self, ijk: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + self.spacing[0] * ijk[0] as f64,
            self.origin[1] + self.spacing[1] * ijk[1] as f64,
            self.origin[2] + self.spacing[2] * ijk[2] as f64,
        ]
    }

    /// Continuous voxel index of a physical point.
    #[inline]
    pub fn continuous_index(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Physical center of the grid hull.
    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + 0.5 * (self.shape[a] as f64 - 1.0) * self.spacing[a])
    }

    /// Physical extent of the field of view (voxel count times spacing).
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.shape[a] as f64 * self.spacing[a])
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Grid covering the same field of view with `shape` voxels.
    pub fn resampled(&self, shape: [usize; 3]) -> Result<Grid> {
        let extent = self.extent();
        let center = self.center();
        let spacing = [0, 1, 2].map(|a| extent[a] / shape[a] as f64);
        let origin = [0, 1, 2].map(|a| center[a] - 0.5 * (shape[a] as f64 - 1.0) * spacing[a]);
        Grid::new(shape, spacing, origin)
    }

    /// Iterates voxel centers in storage order.
    pub fn points(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        let [nx, ny, nz] = self.shape;
        (0..nz).flat_map(move |k| (0..ny).flat_map(move |j| (0..nx).map(move |i| self.point([i, j, k]))))
    }
}

/// Scalar 3D image on a [`Grid`]. Values are kept in 64-bit precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match grid {:?}",
                data.len(),
                grid.shape
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-finite value at voxel {index}")));
        }
        Ok(Volume { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Volume {
            data: vec![0.0; grid.len()],
            grid,
        }
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        Volume {
            data: vec![value; grid.len()],
            grid,
        }
    }

    /// Builds a volume by evaluating `f` at every voxel center.
    pub fn from_fn(grid: Grid, mut f: impl FnMut([f64; 3]) -> f64) -> Result<Self> {
        let data = grid.points().map(&mut f).collect();
        Volume::new(grid, data)
    }

    pub(crate) fn from_parts_unchecked(grid: Grid, data: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len(), data.len());
        Volume { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn shape(&self) -> [usize; 3] {
        self.grid.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn set(&mut self, ijk: [usize; 3], value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::InvalidVolume("non-finite value".into()));
        }
        let idx = self.grid.index(ijk[0], ijk[1], ijk[2]);
        self.data[idx] = value;
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Intensity-weighted centroid in mm; `None` when the total weight is zero.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        let mut total = 0.0;
        let mut acc = [0.0; 3];
        for (v, p) in self.data.iter().zip(self.grid.points()) {
            total += v;
            for a in 0..3 {
                acc[a] += v * p[a];
            }
        }
        (total.abs() > 0.0).then(|| acc.map(|x| x / total))
    }

    /// Applies `f` voxelwise, keeping the grid.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Volume> {
        Volume::new(self.grid, self.data.iter().map(|&v| f(v)).collect())
    }
}
