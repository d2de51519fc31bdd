use nalgebra::{Matrix4, Rotation3, Unit, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::AffineTransform;

/// Bounds of a random pose `T · R · S`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseJitter {
    pub max_rotation_deg: f64,
    /// Per-axis scale is drawn from `1 ± max_scale`.
    pub max_scale: f64,
    /// Per-axis translation bound in mm.
    pub max_translation: f64,
}

/// Rotation about a uniformly drawn axis, per-axis scaling, then translation.
pub fn random_pose(rng: &mut impl Rng, jitter: &PoseJitter) -> AffineTransform {
    let axis = loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            break Unit::new_normalize(v);
        }
    };
    let angle = rng
        .random_range(-jitter.max_rotation_deg..=jitter.max_rotation_deg)
        .to_radians();
    let rot = Rotation3::from_axis_angle(&axis, angle).into_inner();
    let scale = [0; 3].map(|_| 1.0 + rng.random_range(-jitter.max_scale..=jitter.max_scale));
    let shift = [0; 3].map(|_| rng.random_range(-jitter.max_translation..=jitter.max_translation));
    let mut m = Matrix4::identity();
    for r in 0..3 {
        for c in 0..3 {
            m[(r, c)] = rot[(r, c)] * scale[c];
        }
        m[(r, 3)] = shift[r];
    }
    AffineTransform::from_matrix(m).expect("rotation-scale matrices are invertible")
}
