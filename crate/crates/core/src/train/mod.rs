//! Fitting surrogate stacks to cached targets.
//!
//! A training unit is one query position (all of its layer and head records)
//! when only regression terms are active, and one whole query sequence when
//! the distillation term is active, since the blended student must replay the
//! sequence from its first token.

mod loss;
mod optim;

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use loss::{
    distill_gradients, kl_from_logits, loss_distill, loss_regression, record_blended_forward, regression_gradients,
    LossTerms, LossWeights,
};
pub use optim::{scaled_peak, warmup_steps, Adam, AdamConfig, BatchRule, Schedule, StepInfo};

use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::oracle::TargetCache;
use crate::surrogate::{SurrogateFamily, SurrogateStack};
use crate::tensor::Prng;

fn default_budget() -> u64 {
    1_000_000
}

fn default_peak() -> f64 {
    1e-4
}

fn default_cap() -> usize {
    196
}

fn default_log_every() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossWeights,
    /// Training units drawn in total.
    #[serde(default = "default_budget")]
    pub budget_samples: u64,
    /// Peak rate before the `√(b/b_ref)` rescaling.
    #[serde(default = "default_peak")]
    pub peak_lr: f64,
    #[serde(default)]
    pub batch_rule: BatchRule,
    /// Overrides the batch-size rule when set.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    /// Query sequences longer than this are left out.
    #[serde(default = "default_cap")]
    pub query_len_cap: usize,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// Steps between checkpoint callbacks; `None` disables them.
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossWeights::REGRESSION,
            budget_samples: default_budget(),
            peak_lr: default_peak(),
            batch_rule: BatchRule::default(),
            batch_size: None,
            adam: AdamConfig::default(),
            seed: 0,
            query_len_cap: default_cap(),
            log_every: default_log_every(),
            checkpoint_every: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub lr: f64,
    pub l_alpha: f64,
    pub l_a: f64,
    pub l_kl: f64,
    /// Seconds since training began; kept out of the deterministic CSV.
    pub wallclock: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    /// `step,lr,L_alpha,L_A,L_KL` rows; byte-identical across identical runs.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,L_alpha,L_A,L_KL\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.step, r.lr, r.l_alpha, r.l_a, r.l_kl);
        }
        s
    }

    /// `step,wallclock_s` rows.
    pub fn wallclock_csv(&self) -> String {
        let mut s = String::from("step,wallclock_s\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6}", r.step, r.wallclock);
        }
        s
    }
}

/// Hyperparameters actually used by a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveHyper {
    pub loss: LossWeights,
    pub batch_size: usize,
    pub steps: u64,
    pub warmup: u64,
    pub peak_lr: f64,
    pub dataset_units: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub stack: SurrogateStack,
    pub log: MetricLog,
    pub hyper: EffectiveHyper,
    /// Non-finite gradient entries masked over the run.
    pub masked: usize,
}

/// Resolves batch size, step count, warmup, and peak rate for a run.
pub fn effective_hyper(stack: &SurrogateStack, cfg: &TrainConfig, dataset_units: usize) -> Result<EffectiveHyper> {
    cfg.loss.validate()?;
    let mut loss = cfg.loss;
    if matches!(stack.family(), SurrogateFamily::Quadrature) {
        loss.lambda_alpha = 0.0;
        if !loss.regression_active() && !loss.distill_active() {
            return Err(Error::InvalidConfig("quadrature training needs λ_A or λ_KL > 0".into()));
        }
    }
    let plan = stack.plan();
    let batch = match cfg.batch_size {
        Some(0) => return Err(Error::InvalidConfig("batch size must be ≥ 1".into())),
        Some(b) => b,
        None => cfg.batch_rule.batch_size(plan.context_len, plan.rho, loss.distill_active()),
    };
    if cfg.budget_samples < batch as u64 {
        return Err(Error::InvalidConfig(format!(
            "budget of {} samples is smaller than one batch of {batch}",
            cfg.budget_samples
        )));
    }
    if dataset_units == 0 {
        return Err(Error::Empty("training set"));
    }
    let steps = cfg.budget_samples / batch as u64;
    Ok(EffectiveHyper {
        loss,
        batch_size: batch,
        steps,
        warmup: warmup_steps(steps, dataset_units as u64, batch as u64),
        peak_lr: scaled_peak(cfg.peak_lr, batch, cfg.batch_rule.reference_batch),
        dataset_units,
    })
}

/// Training units: `(sample, position)` pairs for regression-only runs,
/// `(sample, 0)` per sequence when distillation is active.
fn training_units(cache: &TargetCache, cap: usize, distill: bool) -> Vec<(usize, usize)> {
    cache
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_empty() && s.len() <= cap)
        .flat_map(|(i, s)| {
            let n = if distill { 1 } else { s.len() };
            (0..n).map(move |p| (i, p))
        })
        .collect()
}

/// Loss terms and gradients of one batch; gradients are added into `grads`.
pub fn batch_gradients(
    weights: &ModelWeights,
    stack: &SurrogateStack,
    cache: &TargetCache,
    units: &[(usize, usize)],
    loss: LossWeights,
    grads: &mut [Vec<f64>],
) -> Result<LossTerms> {
    let mut terms = LossTerms::default();
    if loss.distill_active() {
        let samples: Vec<usize> = units.iter().map(|u| u.0).collect();
        let positions: Vec<(usize, usize)> = samples
            .iter()
            .flat_map(|&s| (0..cache.samples[s].len()).map(move |p| (s, p)))
            .collect();
        let (la, lt) = regression_gradients(stack, cache, &positions, loss, grads)?;
        terms.alpha = la;
        terms.target = lt;
        let count = positions.len() as f64;
        let (kl, _) = distill_gradients(weights, stack, cache, &samples, loss.lambda_kl / count, grads)?;
        terms.kl = kl / count;
    } else {
        let (la, lt) = regression_gradients(stack, cache, units, loss, grads)?;
        terms.alpha = la;
        terms.target = lt;
    }
    Ok(terms)
}

/// Runs the full optimization. `on_checkpoint(step, stack)` is called every
/// `checkpoint_every` steps and after the final step.
pub fn train(
    weights: &ModelWeights,
    mut stack: SurrogateStack,
    cache: &TargetCache,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(u64, &SurrogateStack) -> Result<()>,
) -> Result<TrainOutcome> {
    let base_hash = weights.weights_hash();
    stack.check_key(cache.header.key_hash)?;
    let distill = cfg.loss.distill_active();
    let mut units = training_units(cache, cfg.query_len_cap, distill);
    let hyper = effective_hyper(&stack, cfg, units.len())?;
    let schedule = Schedule::new(hyper.peak_lr, hyper.warmup, hyper.steps)?;
    let mut adam = Adam::new(cfg.adam, stack.modules().iter().map(|m| m.param_count()));
    let mut rng = Prng::new(cfg.seed).split(0x74_7261_696e);
    rng.shuffle(&mut units);
    let mut cursor = 0;
    let mut log = MetricLog::default();
    let mut masked = 0;
    let start = Instant::now();
    let b = hyper.batch_size;
    for step in 1..=hyper.steps {
        let mut batch = Vec::with_capacity(b);
        while batch.len() < b {
            if cursor == units.len() {
                rng.shuffle(&mut units);
                cursor = 0;
            }
            let take = (b - batch.len()).min(units.len() - cursor);
            batch.extend_from_slice(&units[cursor..cursor + take]);
            cursor += take;
        }
        let mut grads: Vec<Vec<f64>> = stack.modules().iter().map(|m| vec![0.0; m.param_count()]).collect();
        let terms = batch_gradients(weights, &stack, cache, &batch, hyper.loss, &mut grads)?;
        let lr = schedule.lr(step);
        let mut params: Vec<&mut [f64]> = stack.modules_mut().iter_mut().map(|m| m.params_mut()).collect();
        masked += adam.step(&mut params, &mut grads, lr)?.masked;
        if step == 1 || step == hyper.steps || step % cfg.log_every.max(1) == 0 {
            log.rows.push(MetricRow {
                step,
                lr,
                l_alpha: terms.alpha,
                l_a: terms.target,
                l_kl: terms.kl,
                wallclock: start.elapsed().as_secs_f64(),
            });
        }
        let due = cfg.checkpoint_every.is_some_and(|k| k > 0 && step % k == 0);
        if due || step == hyper.steps {
            on_checkpoint(step, &stack)?;
        }
    }
    if weights.weights_hash() != base_hash {
        return Err(Error::Invariant("base model weights changed during training".into()));
    }
    Ok(TrainOutcome {
        stack,
        log,
        hyper,
        masked,
    })
}
