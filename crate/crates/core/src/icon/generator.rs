//! Moment-feature affine generator.
//!
//! Each image is summarized by intensity moments (mass, centroid, central
//! second moments) and an intensity histogram, all in physical units scaled
//! by a fixed length. A weight matrix maps the concatenated pair features
//! `[f(A), f(B)]` to the twelve coefficients of the upper 3×4 block of a
//! Lie-algebra element θ. Translation coefficients are scaled back to mm.

use nalgebra::Matrix4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Volume;

/// Number of Lie-algebra coefficients predicted per pair.
pub const COEFFS: usize = 12;

const THIRD_ORDER: [[usize; 3]; 10] = [
    [0, 0, 0],
    [1, 1, 1],
    [2, 2, 2],
    [0, 0, 1],
    [0, 0, 2],
    [1, 1, 0],
    [1, 1, 2],
    [2, 2, 0],
    [2, 2, 1],
    [0, 1, 2],
];

/// Which per-image statistics feed the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub mass: bool,
    pub centroid: bool,
    pub second_moments: bool,
    /// Central third-order moments (ten values). Off by default; they pin
    /// down the rotations that second moments leave ambiguous.
    #[serde(default)]
    pub third_moments: bool,
    pub histogram_bins: usize,
    pub intensity_range: (f64, f64),
    /// Length (mm) used to make positional features dimensionless.
    pub length_scale: f64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            mass: true,
            centroid: true,
            second_moments: true,
            third_moments: false,
            histogram_bins: 8,
            intensity_range: (0.0, 1.0),
            length_scale: 32.0,
        }
    }
}

impl FeatureSpec {
    pub fn with_length_scale(length_scale: f64) -> Self {
        FeatureSpec {
            length_scale,
            ..FeatureSpec::default()
        }
    }

    /// Per-image feature count.
    pub fn dim(&self) -> usize {
        self.mass as usize
            + 3 * self.centroid as usize
            + 6 * self.second_moments as usize
            + 10 * self.third_moments as usize
            + self.histogram_bins
    }

    fn centroid_offset(&self) -> Option<usize> {
        self.centroid.then_some(self.mass as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.intensity_range;
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "length_scale must be positive, got {}",
                self.length_scale
            )));
        }
        if self.histogram_bins > 0 && !(hi > lo) {
            return Err(Error::InvalidConfig(format!("intensity range ({lo}, {hi}) is empty")));
        }
        if self.dim() == 0 {
            return Err(Error::InvalidConfig("feature spec selects nothing".into()));
        }
        Ok(())
    }

    /// Moment and histogram features of one image.
    pub fn image_features(&self, vol: &Volume) -> Vec<f64> {
        let grid = vol.grid();
        let l = self.length_scale;
        let mut total = 0.0;
        let mut first = [0.0; 3];
        let mut second = [0.0; 6];
        let mut third = [0.0; 10];
        let mut hist = vec![0.0; self.histogram_bins];
        let (lo, hi) = self.intensity_range;
        let bins = self.histogram_bins as f64;
        let last_bin = self.histogram_bins.saturating_sub(1);
        let [nx, ny, nz] = grid.shape;
        let data = vol.data();
        let mut idx = 0;
        for k in 0..nz {
            let z = (grid.origin[2] + grid.spacing[2] * k as f64) / l;
            for j in 0..ny {
                let y = (grid.origin[1] + grid.spacing[1] * j as f64) / l;
                for i in 0..nx {
                    let x = (grid.origin[0] + grid.spacing[0] * i as f64) / l;
                    let v = data[idx];
                    idx += 1;
                    if self.histogram_bins > 0 {
                        let b = ((v - lo) / (hi - lo)) * bins;
                        let b = if b > 0.0 { (b as usize).min(last_bin) } else { 0 };
                        hist[b] += 1.0;
                    }
                    if v == 0.0 {
                        continue;
                    }
                    total += v;
                    first[0] += v * x;
                    first[1] += v * y;
                    first[2] += v * z;
                    second[0] += v * x * x;
                    second[1] += v * y * y;
                    second[2] += v * z * z;
                    second[3] += v * x * y;
                    second[4] += v * x * z;
                    second[5] += v * y * z;
                    if self.third_moments {
                        let p = [x, y, z];
                        for (acc, [a, b, c]) in third.iter_mut().zip(THIRD_ORDER) {
                            *acc += v * p[a] * p[b] * p[c];
                        }
                    }
                }
            }
        }

        let mut out = Vec::with_capacity(self.dim());
        if self.mass {
            out.push(total * grid.voxel_volume() / (l * l * l));
        }
        let mut central3 = [0.0; 10];
        let (centroid, central) = if total > 1e-12 {
            let c = first.map(|f| f / total);
            let central = [
                second[0] / total - c[0] * c[0],
                second[1] / total - c[1] * c[1],
                second[2] / total - c[2] * c[2],
                second[3] / total - c[0] * c[1],
                second[4] / total - c[0] * c[2],
                second[5] / total - c[1] * c[2],
            ];
            if self.third_moments {
                // E[u_a u_b u_c] from raw moments, u = x - c
                let raw2 = |a: usize, b: usize| -> f64 {
                    let idx = match (a.min(b), a.max(b)) {
                        (0, 0) => 0,
                        (1, 1) => 1,
                        (2, 2) => 2,
                        (0, 1) => 3,
                        (0, 2) => 4,
                        _ => 5,
                    };
                    second[idx] / total
                };
                for (out, (raw, [a, b, d])) in central3.iter_mut().zip(third.iter().zip(THIRD_ORDER)) {
                    *out = raw / total - c[a] * raw2(b, d) - c[b] * raw2(a, d) - c[d] * raw2(a, b)
                        + 2.0 * c[a] * c[b] * c[d];
                }
            }
            (c, central)
        } else {
            (grid.center().map(|c| c / l), [0.0; 6])
        };
        if self.centroid {
            out.extend_from_slice(&centroid);
        }
        if self.second_moments {
            out.extend_from_slice(&central);
        }
        if self.third_moments {
            out.extend_from_slice(&central3);
        }
        let n = vol.data().len() as f64;
        out.extend(hist.into_iter().map(|h| h / n));
        out
    }
}

/// Linear map from pair features to a Lie-algebra element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineGenerator {
    spec: FeatureSpec,
    /// `COEFFS × 2·dim`, row-major; columns are `[f(A), f(B)]`.
    weights: Vec<f64>,
}

impl AffineGenerator {
    pub fn zeros(spec: FeatureSpec) -> Result<Self> {
        spec.validate()?;
        Ok(AffineGenerator {
            weights: vec![0.0; COEFFS * 2 * spec.dim()],
            spec,
        })
    }

    pub fn from_weights(spec: FeatureSpec, weights: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if weights.len() != COEFFS * 2 * spec.dim() {
            return Err(Error::ShapeMismatch(format!(
                "generator expects {} weights, got {}",
                COEFFS * 2 * spec.dim(),
                weights.len()
            )));
        }
        if let Some(index) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(AffineGenerator { spec, weights })
    }

    /// Weights drawn uniformly from `[-scale, scale]`.
    pub fn random(spec: FeatureSpec, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut g = AffineGenerator::zeros(spec)?;
        for w in &mut g.weights {
            *w = rng.random_range(-scale..=scale);
        }
        Ok(g)
    }

    /// Predicts the centroid difference as a pure translation, so that the
    /// inverse-consistent primitive maps the fixed centroid onto the moving
    /// one.
    pub fn centroid_translation(spec: FeatureSpec) -> Result<Self> {
        let offset = spec
            .centroid_offset()
            .ok_or_else(|| Error::InvalidConfig("centroid features are disabled".into()))?;
        let mut g = AffineGenerator::zeros(spec)?;
        let dim = g.spec.dim();
        for axis in 0..3 {
            let row = axis * 4 + 3;
            g.weights[row * 2 * dim + offset + axis] = 1.0;
            g.weights[row * 2 * dim + dim + offset + axis] = -1.0;
        }
        Ok(g)
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.weights
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn features(&self, vol: &Volume) -> Vec<f64> {
        self.spec.image_features(vol)
    }

    #[inline]
    fn output_scale(&self, coeff: usize) -> f64 {
        if coeff % 4 == 3 {
            self.spec.length_scale
        } else {
            1.0
        }
    }

    /// Raw prediction θ(A, B).
    pub fn theta(&self, fa: &[f64], fb: &[f64]) -> [f64; COEFFS] {
        let dim = self.spec.dim();
        std::array::from_fn(|i| {
            let row = &self.weights[i * 2 * dim..(i + 1) * 2 * dim];
            let s: f64 = row[..dim].iter().zip(fa).map(|(w, f)| w * f).sum::<f64>()
                + row[dim..].iter().zip(fb).map(|(w, f)| w * f).sum::<f64>();
            self.output_scale(i) * s
        })
    }

    /// `(θ(A, B) − θ(B, A)) / 2`, the inverse-consistent generator.
    pub fn antisymmetric(&self, fa: &[f64], fb: &[f64]) -> [f64; COEFFS] {
        let ab = self.theta(fa, fb);
        let ba = self.theta(fb, fa);
        std::array::from_fn(|i| (ab[i] - ba[i]) / 2.0)
    }

    /// Chain rule from `∂loss/∂G` (G the antisymmetric generator at features
    /// `fa`, `fb`) to `∂loss/∂weights`.
    pub fn weight_gradient(&self, fa: &[f64], fb: &[f64], d_coeffs: &[f64; COEFFS]) -> Vec<f64> {
        let dim = self.spec.dim();
        let mut grad = vec![0.0; self.weights.len()];
        for i in 0..COEFFS {
            let scale = 0.5 * self.output_scale(i) * d_coeffs[i];
            let row = &mut grad[i * 2 * dim..(i + 1) * 2 * dim];
            for j in 0..dim {
                let d = scale * (fa[j] - fb[j]);
                row[j] = d;
                row[dim + j] = -d;
            }
        }
        grad
    }
}

/// Embeds twelve coefficients as the upper 3×4 block of a 4×4 matrix.
pub fn coefficients_to_matrix(c: &[f64; COEFFS]) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    for r in 0..3 {
        for col in 0..4 {
            m[(r, col)] = c[r * 4 + col];
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blob(center: [f64; 3]) -> Volume {
        let g = Grid::centered([24, 24, 24], 1.0).unwrap();
        Volume::from_fn(g, |p| {
            let r2: f64 = (0..3).map(|a| (p[a] - center[a]).powi(2)).sum();
            (-r2 / 8.0).exp()
        })
        .unwrap()
    }

    #[test]
    fn third_moments_match_two_pass() {
        let spec = FeatureSpec {
            third_moments: true,
            histogram_bins: 0,
            ..FeatureSpec::with_length_scale(4.0)
        };
        assert_eq!(spec.dim(), 20);
        let g = Grid::centered([10, 9, 8], 1.0).unwrap();
        let vol = Volume::from_fn(g, |p| {
            let r2 = (p[0] - 1.0).powi(2) / 6.0 + (p[1] + 0.5).powi(2) / 3.0 + p[2] * p[2] / 2.0;
            (-r2).exp() * (1.0 + 0.3 * p[0] - 0.2 * p[1] * p[2]).max(0.0)
        })
        .unwrap();
        let f = spec.image_features(&vol);
        let pts: Vec<[f64; 3]> = g.points().map(|p| p.map(|x| x / 4.0)).collect();
        let w = vol.data();
        let total: f64 = w.iter().sum();
        let c: [f64; 3] = std::array::from_fn(|a| pts.iter().zip(w).map(|(p, v)| v * p[a]).sum::<f64>() / total);
        for (n, [a, b, d]) in THIRD_ORDER.iter().enumerate() {
            let direct = pts
                .iter()
                .zip(w)
                .map(|(p, v)| v * (p[*a] - c[*a]) * (p[*b] - c[*b]) * (p[*d] - c[*d]))
                .sum::<f64>()
                / total;
            assert!((f[10 + n] - direct).abs() < 1e-12, "{n}: {} vs {direct}", f[10 + n]);
        }
    }

    #[test]
    fn feature_layout() {
        let spec = FeatureSpec::default();
        assert_eq!(spec.dim(), 18);
        let f = spec.image_features(&blob([1.0, -2.0, 0.5]));
        assert_eq!(f.len(), 18);
        let hist: f64 = f[10..].iter().sum();
        assert!((hist - 1.0).abs() < 1e-12);
    }

    #[test]
    fn centroid_feature_tracks_shift() {
        let spec = FeatureSpec::with_length_scale(10.0);
        let a = spec.image_features(&blob([1.0, 0.0, 0.0]));
        let b = spec.image_features(&blob([0.0, 0.0, 0.0]));
        assert!((a[1] - b[1] - 0.1).abs() < 1e-3);
    }

    #[test]
    fn antisymmetry_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = FeatureSpec::default();
        let g = AffineGenerator::random(spec.clone(), 1.0, &mut rng).unwrap();
        let fa = spec.image_features(&blob([1.0, 2.0, 0.0]));
        let fb = spec.image_features(&blob([0.0, -1.0, 1.0]));
        let ab = g.antisymmetric(&fa, &fb);
        let ba = g.antisymmetric(&fb, &fa);
        for i in 0..COEFFS {
            assert_eq!(ab[i], -ba[i]);
        }
        assert_eq!(g.antisymmetric(&fa, &fa), [0.0; COEFFS]);
    }

    #[test]
    fn symmetric_weights_cancel() {
        let spec = FeatureSpec::default();
        let dim = spec.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = AffineGenerator::random(spec.clone(), 1.0, &mut rng).unwrap();
        // make θ(A, B) symmetric by copying the A block onto the B block
        let w = g.params_mut();
        for i in 0..COEFFS {
            for j in 0..dim {
                w[i * 2 * dim + dim + j] = w[i * 2 * dim + j];
            }
        }
        let fa = spec.image_features(&blob([1.0, 2.0, 0.0]));
        let fb = spec.image_features(&blob([0.0, -1.0, 1.0]));
        assert_eq!(g.antisymmetric(&fa, &fb), [0.0; COEFFS]);
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = FeatureSpec::default();
        let g = AffineGenerator::random(spec.clone(), 0.5, &mut rng).unwrap();
        let fa = spec.image_features(&blob([1.0, 2.0, 0.0]));
        let fb = spec.image_features(&blob([0.0, -1.0, 1.0]));
        let upstream: [f64; COEFFS] = std::array::from_fn(|i| (i as f64 * 0.7).cos());
        let objective = |g: &AffineGenerator| -> f64 {
            let c = g.antisymmetric(&fa, &fb);
            c.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let grad = g.weight_gradient(&fa, &fb, &upstream);
        for idx in (0..grad.len()).step_by(7) {
            let mut plus = g.clone();
            plus.params_mut()[idx] += 1e-6;
            let mut minus = g.clone();
            minus.params_mut()[idx] -= 1e-6;
            let fd = (objective(&plus) - objective(&minus)) / 2e-6;
            assert!(
                (fd - grad[idx]).abs() < 1e-6 * (1.0 + fd.abs()),
                "{idx}: {fd} vs {}",
                grad[idx]
            );
        }
    }

    #[test]
    fn centroid_translation_recovers_shift() {
        let spec = FeatureSpec::with_length_scale(20.0);
        let g = AffineGenerator::centroid_translation(spec.clone()).unwrap();
        let fa = spec.image_features(&blob([1.5, 0.0, -1.0]));
        let fb = spec.image_features(&blob([0.0, 0.0, 0.0]));
        let c = g.antisymmetric(&fa, &fb);
        assert!((c[3] - 1.5).abs() < 0.05);
        assert!((c[11] + 1.0).abs() < 0.05);
        assert!(c.iter().enumerate().all(|(i, v)| i % 4 == 3 || *v == 0.0));
    }
}
