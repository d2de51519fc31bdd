//! Matrix exponential, square root and logarithm for 4×4 homogeneous
//! matrices.
//!
//! `expm` uses scaling and squaring around a truncated Taylor core. The
//! scaling count is the smallest `k` with `‖L / 2^k‖₁ ≤ 0.5`; at that norm
//! eighteen Taylor terms leave a truncation error below 1e-21.

use nalgebra::Matrix4;

use crate::error::{Error, Result};

const TAYLOR_TERMS: usize = 18;
const SCALED_NORM: f64 = 0.5;

/// Maximum absolute column sum.
pub fn one_norm(m: &Matrix4<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest absolute entry.
pub fn max_abs(m: &Matrix4<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Matrix exponential. Non-finite input yields a NaN matrix.
pub fn expm(l: &Matrix4<f64>) -> Matrix4<f64> {
    let norm = one_norm(l);
    if !norm.is_finite() {
        return Matrix4::from_element(f64::NAN);
    }
    let mut squarings = 0u32;
    let mut scaled_norm = norm;
    while scaled_norm > SCALED_NORM {
        scaled_norm *= 0.5;
        squarings += 1;
    }
    let a = l * 0.5f64.powi(squarings as i32);

    // Horner form of sum_{n=0}^{N} a^n / n!
    let id = Matrix4::identity();
    let mut acc = id;
    for n in (1..=TAYLOR_TERMS).rev() {
        acc = id + (a * acc) / n as f64;
    }
    for _ in 0..squarings {
        acc = acc * acc;
    }
    acc
}

/// Principal square root by the Denman–Beavers iteration.
pub fn sqrtm(m: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    let mut y = *m;
    let mut z = Matrix4::identity();
    for _ in 0..100 {
        let y_inv = y
            .try_inverse()
            .ok_or_else(|| Error::NoLogarithm("singular iterate in square root".into()))?;
        let z_inv = z
            .try_inverse()
            .ok_or_else(|| Error::NoLogarithm("singular iterate in square root".into()))?;
        let y_next = (y + z_inv) * 0.5;
        let z_next = (z + y_inv) * 0.5;
        let delta = max_abs(&(y_next - y));
        y = y_next;
        z = z_next;
        if delta <= 1e-15 * max_abs(&y).max(1.0) {
            if y.iter().all(|v| v.is_finite()) {
                return Ok(y);
            }
            break;
        }
    }
    if y.iter().all(|v| v.is_finite()) && max_abs(&(y * y - m)) < 1e-10 * max_abs(m).max(1.0) {
        Ok(y)
    } else {
        Err(Error::NoLogarithm("square root iteration did not converge".into()))
    }
}

/// Principal logarithm by inverse scaling and squaring: repeated square
/// roots until the matrix is within 0.25 of the identity, then the
/// Mercator series.
pub fn logm(m: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    let id = Matrix4::identity();
    let mut x = *m;
    let mut roots = 0;
    while one_norm(&(x - id)) > 0.25 {
        if roots >= 40 {
            return Err(Error::NoLogarithm("matrix too far from identity".into()));
        }
        x = sqrtm(&x)?;
        roots += 1;
    }
    let d = x - id;
    let mut term = d;
    let mut acc = Matrix4::zeros();
    for n in 1..=60 {
        let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
        acc += term * (sign / n as f64);
        term *= d;
        if max_abs(&term) < 1e-20 {
            break;
        }
    }
    Ok(acc * 2f64.powi(roots))
}
