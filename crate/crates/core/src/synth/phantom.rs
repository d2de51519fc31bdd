//! Analytic phantoms built from soft-edged ellipsoids.

use nalgebra::{Matrix3, Vector3};

use crate::error::Result;
use crate::geometry::{AffineTransform, Grid, Volume};

/// One soft ellipsoid. `axes` rotates world offsets into the ellipsoid frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub axes: Matrix3<f64>,
    pub intensity: f64,
}

impl Ellipsoid {
    pub fn axis_aligned(center: [f64; 3], radii: [f64; 3], intensity: f64) -> Self {
        Ellipsoid {
            center,
            radii,
            axes: Matrix3::identity(),
            intensity,
        }
    }

    /// Normalized radius: < 1 inside, 1 on the surface.
    pub fn radius(&self, p: [f64; 3]) -> f64 {
        let d = self.axes * Vector3::new(p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]);
        ((d[0] / self.radii[0]).powi(2) + (d[1] / self.radii[1]).powi(2) + (d[2] / self.radii[2]).powi(2)).sqrt()
    }
}

/// Sum of soft ellipsoid indicators, clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub parts: Vec<Ellipsoid>,
    /// Edge width as a fraction of the normalized radius.
    pub edge: f64,
}

impl Phantom {
    /// Asymmetric test object spanning roughly half of a field of view of
    /// half-width `half_fov`, with distinct extents along every axis.
    pub fn reference(half_fov: f64) -> Self {
        let s = half_fov;
        let tilt = nalgebra::Rotation3::from_euler_angles(0.3, -0.2, 0.5).into_inner();
        let part = |c: [f64; 3], r: [f64; 3], intensity: f64| {
            Ellipsoid::axis_aligned(c.map(|x| x * s), r.map(|x| x * s), intensity)
        };
        Phantom {
            parts: vec![
                part([0.0, 0.0, 0.0], [0.45, 0.3, 0.22], 0.5),
                part([0.1, 0.38, 0.0], [0.1, 0.22, 0.1], 0.5),
                part([-0.15, 0.0, 0.35], [0.1, 0.1, 0.2], 0.4),
                Ellipsoid {
                    center: [0.3 * s, -0.2 * s, -0.15 * s],
                    radii: [0.16 * s, 0.1 * s, 0.12 * s],
                    axes: tilt,
                    intensity: 0.4,
                },
                part([-0.25, -0.1, 0.0], [0.1, 0.1, 0.1], -0.3),
            ],
            edge: 0.25,
        }
    }

    pub fn value(&self, p: [f64; 3]) -> f64 {
        let v: f64 = self
            .parts
            .iter()
            .map(|e| {
                let r = e.radius(p);
                e.intensity / (1.0 + ((r - 1.0) / self.edge).exp())
            })
            .sum();
        v.clamp(0.0, 1.0)
    }

    pub fn render(&self, grid: Grid) -> Result<Volume> {
        Volume::from_fn(grid, |p| self.value(p))
    }

    /// Renders the phantom seen through `t`: the result `A` satisfies
    /// `A(t(x)) = phantom(x)`, so `t` is the exact map from fixed to moving
    /// coordinates.
    pub fn render_moved(&self, grid: Grid, t: &AffineTransform) -> Result<Volume> {
        let inv = t.inverse();
        Volume::from_fn(grid, |p| self.value(inv.apply(p)))
    }
}
