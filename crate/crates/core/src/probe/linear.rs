//! One-layer softmax classifier on standardized inputs.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adamw::{adamw_step, AdamWConfig, AdamWState};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"IPPRB1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Loss is logged (and validation checked) every this many iterations.
    pub log_every: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 10_000,
            lr: 1e-3,
            batch_size: 128,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            log_every: 100,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::InvalidConfig(
                "iterations, batch_size and log_every must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lr {} / weight_decay {} out of range",
                self.lr, self.weight_decay
            )));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Per-feature affine normalization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Standardization {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Column statistics of `xs`; zero-variance columns keep std 1.
    pub fn fit(xs: &[Vec<f64>]) -> Self {
        let dim = xs.first().map_or(0, Vec::len);
        let n = xs.len() as f64;
        let mut mean = vec![0.0; dim];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for x in xs {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardization { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    class_count: usize,
    dim: usize,
    /// `class_count × dim`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
    standardization: Standardization,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    pub fn zeros(class_count: usize, dim: usize) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::TooFewClasses(class_count));
        }
        if dim == 0 {
            return Err(Error::DimensionMismatch("probe input dim must be >= 1".into()));
        }
        Ok(LinearProbe {
            class_count,
            dim,
            weights: vec![0.0; class_count * dim],
            bias: vec![0.0; class_count],
            standardization: Standardization::identity(dim),
        })
    }

    pub fn from_parts(weights: Vec<f64>, bias: Vec<f64>, standardization: Standardization) -> Result<Self> {
        let class_count = bias.len();
        let mut p = LinearProbe::zeros(class_count, standardization.mean.len())?;
        if weights.len() != class_count * p.dim || standardization.std.len() != p.dim {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {} classes × {} dims",
                weights.len(),
                class_count,
                p.dim
            )));
        }
        let all = weights
            .iter()
            .chain(&bias)
            .chain(&standardization.mean)
            .chain(&standardization.std);
        if let Some(index) = all.clone().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        p.weights = weights;
        p.bias = bias;
        p.standardization = standardization;
        Ok(p)
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "probe expects {} features, got {}",
                self.dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// Affine class scores of an already standardized vector.
    fn raw_scores(&self, z: &[f64]) -> Vec<f64> {
        self.weights
            .chunks(self.dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(z).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.raw_scores(&self.standardization.apply(x)))
    }

    fn pack(&self) -> Vec<f64> {
        self.weights.iter().chain(&self.bias).copied().collect()
    }

    fn unpack(&mut self, params: &[f64]) {
        let n = self.weights.len();
        self.weights.copy_from_slice(&params[..n]);
        self.bias.copy_from_slice(&params[n..]);
    }
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax of the probe's class scores.
pub fn predict_proba(probe: &LinearProbe, x: &[f64]) -> Result<Vec<f64>> {
    Ok(softmax(&probe.scores(x)?))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn predict_class(probe: &LinearProbe, x: &[f64]) -> Result<usize> {
    Ok(argmax(&probe.scores(x)?))
}

fn check_batch(probe: &LinearProbe, xs: &[Vec<f64>], ys: &[usize]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("empty probe batch".into()));
    }
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vectors but {} labels",
            xs.len(),
            ys.len()
        )));
    }
    for x in xs {
        probe.check_dim(x)?;
    }
    if let Some(&label) = ys.iter().find(|&&y| y >= probe.class_count) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: probe.class_count,
        });
    }
    Ok(())
}

/// Loss and gradient over already standardized inputs selected by `idx`.
fn loss_grad_standardized(probe: &LinearProbe, zs: &[Vec<f64>], ys: &[usize], idx: &[usize]) -> (f64, ProbeGrad) {
    let (c, d) = (probe.class_count, probe.dim);
    let mut grad = ProbeGrad {
        weights: vec![0.0; c * d],
        bias: vec![0.0; c],
    };
    let mut loss = 0.0;
    let inv = 1.0 / idx.len() as f64;
    for &i in idx {
        let z = &zs[i];
        let scores = probe.raw_scores(z);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        loss += lse - scores[ys[i]];
        for (k, &s) in scores.iter().enumerate().take(c) {
            let delta = ((s - lse).exp() - (k == ys[i]) as u8 as f64) * inv;
            grad.bias[k] += delta;
            for (g, v) in grad.weights[k * d..(k + 1) * d].iter_mut().zip(z) {
                *g += delta * v;
            }
        }
    }
    (loss * inv, grad)
}

/// Mean softmax cross-entropy of the batch and its gradient with respect to
/// the weights and bias.
pub fn probe_loss_grad(probe: &LinearProbe, xs: &[Vec<f64>], ys: &[usize]) -> Result<(f64, ProbeGrad)> {
    check_batch(probe, xs, ys)?;
    let zs: Vec<Vec<f64>> = xs.iter().map(|x| probe.standardization.apply(x)).collect();
    let idx: Vec<usize> = (0..xs.len()).collect();
    Ok(loss_grad_standardized(probe, &zs, ys, &idx))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeLog {
    /// Iteration count at each log point.
    pub iterations: Vec<usize>,
    /// Mean mini-batch loss since the previous log point.
    pub loss: Vec<f64>,
    /// Validation loss and accuracy at each log point, when a validation set
    /// is given.
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    /// Iteration whose parameters were kept.
    pub selected_iteration: usize,
}

/// Trains a probe with mini-batch AdamW on standardized inputs. With a
/// validation set, the parameters at the earliest log point of highest
/// validation accuracy are returned; otherwise the final parameters.
pub fn train_probe(
    xs: &[Vec<f64>],
    ys: &[usize],
    class_count: usize,
    validation: Option<(&[Vec<f64>], &[usize])>,
    cfg: &ProbeConfig,
) -> Result<(LinearProbe, ProbeLog)> {
    cfg.validate()?;
    let dim = xs
        .first()
        .ok_or_else(|| Error::EmptyInput("no training examples".into()))?
        .len();
    let mut probe = LinearProbe::zeros(class_count, dim)?;
    check_batch(&probe, xs, ys)?;
    let mut present = ys.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::TooFewClasses(present.len()));
    }
    if let Some((vx, vy)) = validation {
        check_batch(&probe, vx, vy)?;
    }

    let standardization = Standardization::fit(xs);
    let zs: Vec<Vec<f64>> = xs.iter().map(|x| standardization.apply(x)).collect();
    let val: Option<(Vec<Vec<f64>>, Vec<usize>)> =
        validation.map(|(vx, vy)| (vx.iter().map(|x| standardization.apply(x)).collect(), vy.to_vec()));

    let mut params = probe.pack();
    let mut state = AdamWState::new(params.len(), cfg.optimizer());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut cursor = order.len();
    let batch = cfg.batch_size.min(order.len());
    let mut log = ProbeLog::default();
    let mut window = 0.0;
    let mut window_len = 0;
    let mut best: Option<(f64, Vec<f64>)> = None;

    for it in 1..=cfg.iterations {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let (loss, grad) = loss_grad_standardized(&probe, &zs, ys, idx);
        let g: Vec<f64> = grad.weights.iter().chain(&grad.bias).copied().collect();
        adamw_step(&mut params, &g, &mut state)?;
        probe.unpack(&params);
        window += loss;
        window_len += 1;

        if it % cfg.log_every == 0 || it == cfg.iterations {
            log.iterations.push(it);
            log.loss.push(window / window_len as f64);
            window = 0.0;
            window_len = 0;
            if let Some((vz, vy)) = &val {
                let all: Vec<usize> = (0..vz.len()).collect();
                let (vl, _) = loss_grad_standardized(&probe, vz, vy, &all);
                let hits = vz
                    .iter()
                    .zip(vy)
                    .filter(|(z, y)| argmax(&probe.raw_scores(z)) == **y)
                    .count();
                let acc = hits as f64 / vz.len() as f64;
                log.val_loss.push(vl);
                log.val_accuracy.push(acc);
                if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                    best = Some((acc, params.clone()));
                    log.selected_iteration = it;
                }
            }
        }
    }
    match best {
        Some((_, p)) => probe.unpack(&p),
        None => log.selected_iteration = cfg.iterations,
    }
    probe.standardization = standardization;
    Ok((probe, log))
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    class_count: usize,
    dim: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
    cfg: Option<ProbeConfig>,
}

pub fn encode_checkpoint(probe: &LinearProbe, cfg: Option<&ProbeConfig>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CheckpointHeader {
        class_count: probe.class_count,
        dim: probe.dim,
        mean: probe.standardization.mean.clone(),
        std: probe.standardization.std.clone(),
        cfg: cfg.cloned(),
    })?;
    let mut out = Vec::with_capacity(11 + header.len() + 8 * (probe.weights.len() + probe.bias.len()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in probe.weights.iter().chain(&probe.bias) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(LinearProbe, Option<ProbeConfig>)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..7] != CHECKPOINT_MAGIC {
        return Err(Error::MalformedMagic("probe checkpoint".into()));
    }
    let mut rest = &bytes[7..];
    let mut len = [0u8; 4];
    rest.read_exact(&mut len).map_err(|_| Error::TruncatedPayload {
        expected: 11,
        found: bytes.len(),
    })?;
    let len = u32::from_le_bytes(len) as usize;
    if rest.len() < len {
        return Err(Error::TruncatedPayload {
            expected: 11 + len,
            found: bytes.len(),
        });
    }
    let header: CheckpointHeader = serde_json::from_slice(&rest[..len])?;
    let payload = &rest[len..];
    let n = header.class_count * header.dim + header.class_count;
    if payload.len() != 8 * n {
        return Err(Error::TruncatedPayload {
            expected: 11 + len + 8 * n,
            found: bytes.len(),
        });
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let (w, b) = values.split_at(header.class_count * header.dim);
    let probe = LinearProbe::from_parts(
        w.to_vec(),
        b.to_vec(),
        Standardization {
            mean: header.mean,
            std: header.std,
        },
    )?;
    if probe.dim != header.dim {
        return Err(Error::InvalidMetadata(
            "checkpoint dim disagrees with standardization".into(),
        ));
    }
    Ok((probe, header.cfg))
}

pub fn write_checkpoint(path: &Path, probe: &LinearProbe, cfg: Option<&ProbeConfig>) -> Result<()> {
    let bytes = encode_checkpoint(probe, cfg)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io_at(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(LinearProbe, Option<ProbeConfig>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io_at(path, e))?;
    decode_checkpoint(&bytes)
}
