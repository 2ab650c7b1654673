//! Comparisons between surrogate-blended and full-attention behavior.
//!
//! All gaps are "full minus surrogate" for accuracies and "surrogate minus
//! full" for losses, so positive values mean degradation.

mod bench;
mod report;

pub use bench::{bench, full_cache_memory_bytes, stack_memory_bytes, time_surrogate_decode, AtContextLength, BenchOptions, BenchPoint};
pub use report::{reports_csv, EvalReport, HeadRte, CSV_HEADER};

use serde::{Deserialize, Serialize};

use crate::blend::{blended_logits, ContextSummary};
use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::oracle::TargetCache;
use crate::surrogate::SurrogateStack;
use crate::tensor::{argmax, log_sum_exp_unchecked, squared_distance, Vector};
use crate::train::kl_from_logits;

/// Per-sample log ratios below this are clamped.
pub const RTE_LOG_FLOOR: f64 = -700.0;

/// What token-accuracy labels are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// The full model's own argmax at every position: accuracy becomes
    /// agreement with full attention (the full system scores 100%).
    #[default]
    FullArgmax,
    /// The next token of the query sequence; the last position is unlabeled.
    NextToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgreementMetrics {
    pub positions: usize,
    /// Percent.
    pub acc_full: f64,
    pub acc_surrogate: f64,
    /// Percentage points, `acc_full − acc_surrogate`.
    pub token_accuracy_gap: f64,
    /// Accuracy of all-zero logits (argmax token 0).
    pub acc_constant: f64,
    pub constant_baseline_gap: f64,
    /// Mean next-token cross-entropy, nats.
    pub ce_full: f64,
    pub ce_surrogate: f64,
    /// `ce_surrogate − ce_full`.
    pub lm_ce_gap: f64,
    /// Mean `KL(full ‖ surrogate)` over all positions, full vocabulary.
    pub eval_kl: f64,
}

/// Next-token logits of the student for each selected sample.
pub fn student_logits<S: ContextSummary + ?Sized>(
    weights: &ModelWeights,
    summary: &S,
    cache: &TargetCache,
    samples: &[usize],
) -> Result<Vec<Vec<Vector>>> {
    samples
        .iter()
        .map(|&s| {
            let sample = cache.samples.get(s).ok_or_else(|| Error::InvalidArgument(format!("no sample {s}")))?;
            blended_logits(weights, summary, &sample.tokens)
        })
        .collect()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    log_sum_exp_unchecked(logits) - logits[label]
}

/// Accuracy, cross-entropy and KL comparisons given precomputed student
/// logits (`student[i]` belongs to `samples[i]`).
pub fn agreement_from_logits(cache: &TargetCache, samples: &[usize], student: &[Vec<Vector>], labels: LabelSource) -> Result<AgreementMetrics> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let (mut hits_full, mut hits_sur, mut hits_const, mut labeled) = (0usize, 0usize, 0usize, 0usize);
    let (mut ce_full, mut ce_sur, mut ce_count) = (0.0, 0.0, 0usize);
    let (mut kl, mut positions) = (0.0, 0usize);
    for (&s, logits) in samples.iter().zip(student) {
        let tokens = &cache.samples[s].tokens;
        if logits.len() != tokens.len() {
            return Err(Error::InvalidArgument(format!("sample {s}: student logits length mismatch")));
        }
        for (p, sl) in logits.iter().enumerate() {
            let tl = cache.teacher_logits(s, p);
            kl += kl_from_logits(tl, sl);
            positions += 1;
            let next = tokens.get(p + 1).map(|&t| t as usize);
            if let Some(t) = next {
                ce_full += cross_entropy(tl, t);
                ce_sur += cross_entropy(sl, t);
                ce_count += 1;
            }
            let label = match labels {
                LabelSource::FullArgmax => Some(argmax(tl)),
                LabelSource::NextToken => next,
            };
            if let Some(y) = label {
                labeled += 1;
                hits_full += usize::from(argmax(tl) == y);
                hits_sur += usize::from(argmax(sl) == y);
                hits_const += usize::from(y == 0);
            }
        }
    }
    if positions == 0 {
        return Err(Error::Empty("evaluation positions"));
    }
    let pct = |h: usize| if labeled == 0 { 0.0 } else { 100.0 * h as f64 / labeled as f64 };
    let (acc_full, acc_sur, acc_const) = (pct(hits_full), pct(hits_sur), pct(hits_const));
    let mean = |x: f64| if ce_count == 0 { 0.0 } else { x / ce_count as f64 };
    Ok(AgreementMetrics {
        positions,
        acc_full,
        acc_surrogate: acc_sur,
        token_accuracy_gap: acc_full - acc_sur,
        acc_constant: acc_const,
        constant_baseline_gap: acc_full - acc_const,
        ce_full: mean(ce_full),
        ce_surrogate: mean(ce_sur),
        lm_ce_gap: mean(ce_sur) - mean(ce_full),
        eval_kl: kl / positions as f64,
    })
}

/// Runs the blended student over `samples` and compares with the cached
/// full-attention logits.
pub fn agreement<S: ContextSummary + ?Sized>(
    weights: &ModelWeights,
    summary: &S,
    cache: &TargetCache,
    samples: &[usize],
    labels: LabelSource,
) -> Result<AgreementMetrics> {
    let student = student_logits(weights, summary, cache, samples)?;
    agreement_from_logits(cache, samples, &student, labels)
}

pub fn token_accuracy_gap<S: ContextSummary + ?Sized>(weights: &ModelWeights, summary: &S, cache: &TargetCache, samples: &[usize]) -> Result<f64> {
    Ok(agreement(weights, summary, cache, samples, LabelSource::default())?.token_accuracy_gap)
}

pub fn lm_ce_gap<S: ContextSummary + ?Sized>(weights: &ModelWeights, summary: &S, cache: &TargetCache, samples: &[usize]) -> Result<f64> {
    Ok(agreement(weights, summary, cache, samples, LabelSource::default())?.lm_ce_gap)
}

pub fn eval_kl<S: ContextSummary + ?Sized>(weights: &ModelWeights, summary: &S, cache: &TargetCache, samples: &[usize]) -> Result<f64> {
    Ok(agreement(weights, summary, cache, samples, LabelSource::default())?.eval_kl)
}

/// `ln(‖pred − A‖² / ‖q − A‖²)`, floored; `None` when the baseline
/// distance is zero.
pub fn target_log_ratio(pred: &[f64], target: &[f64], q: &[f64]) -> Option<(f64, bool)> {
    let den = squared_distance(q, target);
    if den == 0.0 {
        return None;
    }
    Some(floored_log(squared_distance(pred, target), den))
}

/// `ln((â − α)² / α²)`, floored; `None` when `α = 0`.
pub fn score_log_ratio(pred: f64, alpha: f64) -> Option<(f64, bool)> {
    let den = alpha * alpha;
    if den == 0.0 {
        return None;
    }
    let diff = pred - alpha;
    Some(floored_log(diff * diff, den))
}

fn floored_log(num: f64, den: f64) -> (f64, bool) {
    let v = if num == 0.0 { f64::NEG_INFINITY } else { num.ln() - den.ln() };
    if v < RTE_LOG_FLOOR {
        (RTE_LOG_FLOOR, true)
    } else {
        (v, false)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RteReport {
    /// Sum over (layer, query head) of the mean log ratio.
    pub rte_target: f64,
    pub rte_score: f64,
    /// Per (layer, query head), layer-major.
    pub heads: Vec<HeadRte>,
    pub records: usize,
    pub floored_target: usize,
    pub floored_score: usize,
    pub excluded_target: usize,
    pub excluded_score: usize,
}

/// Relative transport error of an arbitrary predictor
/// `(layer, query head, q) → (score, target)` over cached records.
pub fn rte_with(
    cache: &TargetCache,
    positions: &[(usize, usize)],
    mut predict: impl FnMut(usize, usize, &[f64]) -> (f64, Vec<f64>),
) -> Result<RteReport> {
    if positions.is_empty() {
        return Err(Error::Empty("rte positions"));
    }
    let h = cache.header;
    let hq = h.query_heads();
    let mut report = RteReport::default();
    for layer in 0..h.layers {
        for qh in 0..hq {
            let (mut st, mut nt, mut ss, mut ns) = (0.0, 0usize, 0.0, 0usize);
            for &(s, p) in positions {
                let rec = cache.record(s, p, layer, qh);
                let (score, target) = predict(layer, qh, rec.q);
                report.records += 1;
                match target_log_ratio(&target, rec.target, rec.q) {
                    Some((v, floored)) => {
                        st += v;
                        nt += 1;
                        report.floored_target += usize::from(floored);
                    }
                    None => report.excluded_target += 1,
                }
                match score_log_ratio(score, rec.alpha) {
                    Some((v, floored)) => {
                        ss += v;
                        ns += 1;
                        report.floored_score += usize::from(floored);
                    }
                    None => report.excluded_score += 1,
                }
            }
            let head = HeadRte {
                layer,
                query_head: qh,
                rte_target: if nt > 0 { st / nt as f64 } else { 0.0 },
                rte_score: if ns > 0 { ss / ns as f64 } else { 0.0 },
            };
            report.rte_target += head.rte_target;
            report.rte_score += head.rte_score;
            report.heads.push(head);
        }
    }
    Ok(report)
}

/// Relative transport error of a surrogate stack.
pub fn rte(stack: &SurrogateStack, cache: &TargetCache, positions: &[(usize, usize)]) -> Result<RteReport> {
    stack.check_key(cache.header.key_hash)?;
    rte_with(cache, positions, |l, qh, q| stack.module_for_query(l, qh).forward(q))
}

#[cfg(test)]
mod tests;
