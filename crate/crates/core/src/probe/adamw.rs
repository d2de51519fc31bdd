//! Decoupled-weight-decay Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamWConfig,
}

impl AdamWState {
    pub fn new(len: usize, config: AdamWConfig) -> Self {
        AdamWState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            config,
        }
    }
}

/// One AdamW update in place:
///
/// ```text
/// m ← β1·m + (1−β1)·g,  v ← β2·v + (1−β2)·g²
/// p ← p − lr·( m̂/(√v̂ + ε) + λ·p )
/// ```
///
/// Parameters are left untouched when an error is returned.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamWState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    let AdamWConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.t + 1;
    let c1 = 1.0 - beta1.powf(t as f64);
    let c2 = 1.0 - beta2.powf(t as f64);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * params[i]);
    }
    state.t = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![1.0, -2.0];
        let mut s = AdamWState::new(2, cfg);
        adamw_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn decay_only_step() {
        let mut p = vec![1.0];
        let mut s = AdamWState::new(1, AdamWConfig::default());
        adamw_step(&mut p, &[0.0], &mut s).unwrap();
        assert!((p[0] - 0.99999).abs() < 1e-15);
    }

    #[test]
    fn scalar_trace_matches_script() {
        let cfg = AdamWConfig::default();
        let grads = [1.0, -0.5, 0.25, 2.0, 0.0];
        let mut p = vec![0.3];
        let mut s = AdamWState::new(1, cfg);
        let (mut q, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        for (k, g) in grads.iter().enumerate() {
            adamw_step(&mut p, &[*g], &mut s).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(k as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(k as i32 + 1));
            q -= 1e-3 * (mh / (vh.sqrt() + 1e-8) + 0.01 * q);
            assert!((p[0] - q).abs() < 1e-12, "step {k}");
        }
        // first step with g = 1 moves by lr·(1/(1+ε) + λp)
        let mut p = vec![0.0];
        let mut s = AdamWState::new(1, cfg);
        adamw_step(&mut p, &[1.0], &mut s).unwrap();
        assert!((p[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        let mut s = AdamWState::new(2, AdamWConfig::default());
        let mut p = vec![0.0, 0.0];
        assert!(matches!(
            adamw_step(&mut p, &[0.0], &mut s),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            adamw_step(&mut p, &[0.0, f64::NAN], &mut s),
            Err(Error::NonFiniteGradient { index: 1 })
        ));
        assert_eq!(s.t, 0);
    }
}
