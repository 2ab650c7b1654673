//! Adam with gradient masking and global-norm clipping, the warmup-cosine
//! schedule, and the batch-size rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Decoupled weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Global norm after masking, before clipping.
    pub grad_norm: f64,
    /// Non-finite gradient entries replaced by zero.
    pub masked: usize,
}

/// Moment accumulators shaped like the parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = shapes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { config, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Masks non-finite entries of `grads` to zero, clips the global norm,
    /// then applies one bias-corrected update at rate `lr`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &mut [Vec<f64>], lr: f64) -> Result<StepInfo> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                op: "Adam::step groups",
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads.iter()).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::DimensionMismatch {
                    op: "Adam::step group size",
                    expected: m.len(),
                    got: p.len(),
                });
            }
        }
        let mut masked = 0;
        let mut sq = 0.0;
        for g in grads.iter_mut().flatten() {
            if !g.is_finite() {
                *g = 0.0;
                masked += 1;
            }
            sq += *g * *g;
        }
        let norm = sq.sqrt();
        let c = &self.config;
        let clip = if norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = clip * g[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[i]);
            }
        }
        Ok(StepInfo { grad_norm: norm, masked })
    }
}

/// Linear warmup from 0 to `peak`, then cosine decay to 0 at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
}

impl Schedule {
    pub fn new(peak: f64, warmup: u64, total: u64) -> Result<Self> {
        if warmup > total {
            return Err(Error::InvalidConfig(format!("warmup {warmup} exceeds total {total}")));
        }
        Ok(Self { peak, warmup, total })
    }

    pub fn lr(&self, step: u64) -> f64 {
        let step = step.min(self.total);
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let span = self.total - self.warmup;
        if span == 0 {
            return 0.0;
        }
        let frac = (step - self.warmup) as f64 / span as f64;
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// `min(N/40, 10·N_samples/b)` iterations.
pub fn warmup_steps(total_steps: u64, dataset_samples: u64, batch: u64) -> u64 {
    (total_steps / 40).min(10 * dataset_samples / batch.max(1))
}

/// Peak rate rescaled by `√(b/b_ref)`.
pub fn scaled_peak(peak: f64, batch: usize, reference_batch: usize) -> f64 {
    peak * (batch as f64 / reference_batch as f64).sqrt()
}

/// Reference point of the batch-size rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchRule {
    pub reference_batch: usize,
    pub reference_context: usize,
    pub reference_rho: f64,
}

impl Default for BatchRule {
    fn default() -> Self {
        Self {
            reference_batch: 4,
            reference_context: 62_000,
            reference_rho: 0.05,
        }
    }
}

impl BatchRule {
    /// `clip(b_ref · (n_ref/n) · √(ρ_ref/ρ), 1, 32)`, halved (floor, at
    /// least 1) when distillation is active.
    pub fn batch_size(&self, context_len: usize, rho: f64, distill: bool) -> usize {
        let raw = self.reference_batch as f64 * (self.reference_context as f64 / context_len as f64)
            * (self.reference_rho / rho).sqrt();
        let b = raw.floor().clamp(1.0, 32.0) as usize;
        if distill {
            (b / 2).max(1)
        } else {
            b
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = Adam::new(AdamConfig::default(), [3]);
        let mut p = vec![1.0, -2.0, 0.5];
        let mut g = vec![vec![0.0; 3]];
        adam.step(&mut [&mut p[..]], &mut g, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn clipping_scales_norm_five_by_one_fifth() {
        // With clipping the first moment sees g/5: m = 0.1·(3/5, 4/5).
        let mut adam = Adam::new(AdamConfig::default(), [2]);
        let mut p = [0.0, 0.0];
        let mut g = vec![vec![3.0, 4.0]];
        let info = adam.step(&mut [&mut p[..]], &mut g, 0.0).unwrap();
        assert_eq!(info.grad_norm, 5.0);
        assert!((adam.m[0][0] - 0.06).abs() < 1e-15 && (adam.m[0][1] - 0.08).abs() < 1e-15);
    }

    #[test]
    fn hand_traced_two_parameter_step() {
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, [2]);
        let mut p = vec![1.0, 2.0];
        let mut g = vec![vec![0.3, -0.4]];
        adam.step(&mut [&mut p[..]], &mut g, 0.01).unwrap();
        // Step 1: mhat = g, vhat = g², update = lr·g/(|g| + eps).
        let want = [1.0 - 0.01 * 0.3 / (0.3 + 1e-8), 2.0 + 0.01 * 0.4 / (0.4 + 1e-8)];
        assert!((p[0] - want[0]).abs() < 1e-15 && (p[1] - want[1]).abs() < 1e-15);
        let mut g = vec![vec![0.1, 0.2]];
        let before = p.clone();
        adam.step(&mut [&mut p[..]], &mut g, 0.01).unwrap();
        let m = [0.9 * 0.03 + 0.1 * 0.1, 0.9 * -0.04 + 0.1 * 0.2];
        let v = [0.999 * 0.00009 + 0.001 * 0.01, 0.999 * 0.00016 + 0.001 * 0.04];
        for i in 0..2 {
            let mh = m[i] / (1.0 - 0.81);
            let vh = v[i] / (1.0 - 0.999f64.powi(2));
            let want = before[i] - 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((p[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_entries_masked() {
        let mut adam = Adam::new(AdamConfig::default(), [2]);
        let mut p = [0.0, 0.0];
        let mut g = vec![vec![f64::NAN, 1.0]];
        let info = adam.step(&mut [&mut p[..]], &mut g, 0.1).unwrap();
        assert_eq!(info.masked, 1);
        assert_eq!(p[0], 0.0);
        assert!(p[1] < 0.0);
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::new(1e-3, 10, 100).unwrap();
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(10), 1e-3);
        assert!(s.lr(100).abs() < 1e-18);
        assert!((s.lr(5) - 5e-4).abs() < 1e-18);
        assert!((s.lr(55) - 5e-4).abs() < 1e-15);
        assert!(Schedule::new(1.0, 11, 10).is_err());
        assert!((scaled_peak(1e-4, 16, 4) - 2e-4).abs() < 1e-18);
        assert_eq!(warmup_steps(4000, 20, 4), 50);
        assert_eq!(warmup_steps(4000, 2000, 4), 100);
    }

    #[test]
    fn batch_rule_clips_and_halves() {
        let r = BatchRule::default();
        assert_eq!(r.batch_size(62_000, 0.05, false), 4);
        assert_eq!(r.batch_size(62_000, 0.05, true), 2);
        assert_eq!(r.batch_size(1_000, 0.05, false), 32);
        assert_eq!(r.batch_size(1_000_000, 0.05, false), 1);
        assert_eq!(r.batch_size(1_000_000, 0.05, true), 1);
        assert_eq!(r.batch_size(31_000, 0.2, false), 4);
    }
}
