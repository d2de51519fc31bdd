//! Coordinate maps acting on physical (mm) coordinates.
//!
//! Every transform is a pull-back map: warping a moving image `A` by `t`
//! yields `x ↦ A(t(x))`. Composition follows function composition,
//! `compose(outer, inner)(x) = outer(inner(x))`.

use nalgebra::{Matrix4, Vector4};

use super::expm::{expm, max_abs, sqrtm};
use super::interp::{blend, locate};
use super::volume::Grid;
use crate::error::{Error, Result};

/// Affine map as a homogeneous 4×4 matrix, optionally carrying the Lie
/// algebra generator it was exponentiated from.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineTransform {
    matrix: Matrix4<f64>,
    generator: Option<Matrix4<f64>>,
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            matrix: Matrix4::identity(),
            generator: Some(Matrix4::zeros()),
        }
    }

    /// Validates the bottom row and invertibility.
    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidAffine("non-finite entry".into()));
        }
        if matrix.row(3).iter().zip([0.0, 0.0, 0.0, 1.0]).any(|(a, b)| *a != b) {
            return Err(Error::InvalidAffine(format!(
                "bottom row must be (0,0,0,1), got {:?}",
                matrix.row(3).iter().collect::<Vec<_>>()
            )));
        }
        let det = matrix.fixed_view::<3, 3>(0, 0).determinant();
        if det.abs() <= 1e-12 {
            return Err(Error::SingularAffine(det.abs()));
        }
        Ok(AffineTransform {
            matrix,
            generator: None,
        })
    }

    /// `expm(generator)`. The bottom row of the generator is ignored.
    pub fn from_generator(generator: &Matrix4<f64>) -> Self {
        let mut g = *generator;
        g.row_mut(3).fill(0.0);
        let mut matrix = expm(&g);
        matrix.set_row(3, &Vector4::new(0.0, 0.0, 0.0, 1.0).transpose());
        AffineTransform {
            matrix,
            generator: Some(g),
        }
    }

    /// Attaches a generator after checking `‖expm(generator) − matrix‖∞ < 1e-8`.
    pub fn with_generator(matrix: Matrix4<f64>, generator: Matrix4<f64>) -> Result<Self> {
        let t = AffineTransform::from_matrix(matrix)?;
        let residual = max_abs(&(expm(&generator) - matrix));
        if residual >= 1e-8 {
            return Err(Error::InvalidAffine(format!(
                "generator does not exponentiate to matrix (residual {residual:e})"
            )));
        }
        Ok(AffineTransform {
            generator: Some(generator),
            ..t
        })
    }

    pub fn translation(t: [f64; 3]) -> Self {
        let mut g = Matrix4::zeros();
        let mut m = Matrix4::identity();
        for a in 0..3 {
            g[(a, 3)] = t[a];
            m[(a, 3)] = t[a];
        }
        AffineTransform {
            matrix: m,
            generator: Some(g),
        }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn generator(&self) -> Option<&Matrix4<f64>> {
        self.generator.as_ref()
    }

    pub fn is_identity(&self) -> bool {
        self.matrix == Matrix4::identity()
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [
            m[(0, 0)] * p[0] + m[(0, 1)] * p[1] + m[(0, 2)] * p[2] + m[(0, 3)],
            m[(1, 0)] * p[0] + m[(1, 1)] * p[1] + m[(1, 2)] * p[2] + m[(1, 3)],
            m[(2, 0)] * p[0] + m[(2, 1)] * p[1] + m[(2, 2)] * p[2] + m[(2, 3)],
        ]
    }

    pub fn inverse(&self) -> Self {
        match &self.generator {
            Some(g) => AffineTransform::from_generator(&(-g)),
            None => {
                let mut inv = self
                    .matrix
                    .try_inverse()
                    .expect("validated affine matrices are invertible");
                inv.set_row(3, &Vector4::new(0.0, 0.0, 0.0, 1.0).transpose());
                AffineTransform {
                    matrix: inv,
                    generator: None,
                }
            }
        }
    }

    /// Principal square root: `expm(θ/2)` when the generator is known,
    /// otherwise a Denman–Beavers square root of the matrix.
    pub fn sqrt(&self) -> Result<Self> {
        match &self.generator {
            Some(g) => Ok(AffineTransform::from_generator(&(g * 0.5))),
            None => {
                let mut r = sqrtm(&self.matrix)?;
                r.set_row(3, &Vector4::new(0.0, 0.0, 0.0, 1.0).transpose());
                AffineTransform::from_matrix(r)
            }
        }
    }

    /// `self ∘ inner` as a single matrix.
    pub fn then_apply(&self, inner: &AffineTransform) -> AffineTransform {
        if inner.is_identity() {
            return self.clone();
        }
        if self.is_identity() {
            return inner.clone();
        }
        let mut matrix = self.matrix * inner.matrix;
        matrix.set_row(3, &Vector4::new(0.0, 0.0, 0.0, 1.0).transpose());
        AffineTransform {
            matrix,
            generator: None,
        }
    }

    /// Upper 3×4 block, row-major.
    pub fn upper_block(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[r * 4 + c] = self.matrix[(r, c)];
            }
        }
        out
    }
}

/// Dense displacement field: `t(x) = x + u(x)` with `u` trilinearly
/// interpolated (zero outside the grid hull).
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    grid: Grid,
    vectors: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn new(grid: Grid, vectors: Vec<[f64; 3]>) -> Result<Self> {
        grid.validate()?;
        if vectors.len() != grid.len() {
            return Err(Error::InvalidVolume(format!(
                "displacement field has {} vectors for grid {:?}",
                vectors.len(),
                grid.shape
            )));
        }
        if let Some(i) = vectors.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidVolume(format!("non-finite displacement at voxel {i}")));
        }
        Ok(DisplacementField { grid, vectors })
    }

    pub fn zeros(grid: Grid) -> Self {
        DisplacementField {
            vectors: vec![[0.0; 3]; grid.len()],
            grid,
        }
    }

    /// Samples `f(x) − x` at every voxel center of `grid`.
    pub fn from_transform(t: &MapTransform, grid: Grid) -> Result<Self> {
        let vectors = grid
            .points()
            .map(|p| {
                let q = t.apply(p);
                [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
            })
            .collect();
        DisplacementField::new(grid, vectors)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn vectors(&self) -> &[[f64; 3]] {
        &self.vectors
    }

    pub fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        match locate(&self.grid, p) {
            Some(loc) => [0, 1, 2].map(|c| blend(&self.grid, &loc, |i| self.vectors[i][c])),
            None => [0.0; 3],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let u = self.displacement(p);
        [p[0] + u[0], p[1] + u[1], p[2] + u[2]]
    }
}

/// Any coordinate map used by the registration operators.
#[derive(Clone, Debug, PartialEq)]
pub enum MapTransform {
    Affine(AffineTransform),
    Dense(DisplacementField),
    /// `Composite([f, g, h])` is `f ∘ g ∘ h`: `h` is applied first.
    Composite(Vec<MapTransform>),
}

impl MapTransform {
    pub fn identity() -> Self {
        MapTransform::Affine(AffineTransform::identity())
    }

    pub fn as_affine(&self) -> Option<&AffineTransform> {
        match self {
            MapTransform::Affine(a) => Some(a),
            _ => None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.as_affine().is_some_and(|a| a.is_identity())
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        match self {
            MapTransform::Affine(a) => a.apply(p),
            MapTransform::Dense(d) => d.apply(p),
            MapTransform::Composite(parts) => parts.iter().rev().fold(p, |q, t| t.apply(q)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MapTransform::Composite(parts) if parts.is_empty() => {
                Err(Error::InvalidAffine("empty composite transform".into()))
            }
            MapTransform::Composite(parts) => parts.iter().try_for_each(|p| p.validate()),
            _ => Ok(()),
        }
    }

    fn flatten_into(self, out: &mut Vec<MapTransform>) {
        match self {
            MapTransform::Composite(parts) => {
                for p in parts {
                    p.flatten_into(out);
                }
            }
            other => out.push(other),
        }
    }
}

/// `outer ∘ inner`. Affine neighbours fold into one matrix product and
/// identities are dropped.
pub fn compose(outer: &MapTransform, inner: &MapTransform) -> MapTransform {
    if inner.is_identity() {
        return outer.clone();
    }
    if outer.is_identity() {
        return inner.clone();
    }
    let mut flat = Vec::new();
    outer.clone().flatten_into(&mut flat);
    inner.clone().flatten_into(&mut flat);

    let mut folded: Vec<MapTransform> = Vec::with_capacity(flat.len());
    for t in flat {
        match (folded.last_mut(), t) {
            (Some(MapTransform::Affine(prev)), MapTransform::Affine(next)) => {
                *prev = prev.then_apply(&next);
            }
            (_, t) => folded.push(t),
        }
    }
    folded.retain(|t| !t.is_identity());
    match folded.len() {
        0 => MapTransform::identity(),
        1 => folded.pop().unwrap(),
        _ => MapTransform::Composite(folded),
    }
}
