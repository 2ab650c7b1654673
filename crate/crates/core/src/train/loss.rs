//! Regression and distillation losses with their stack gradients.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::blend::blended_logits;
use crate::error::{check_dim, Error, Result};
use crate::model::ModelWeights;
use crate::oracle::TargetCache;
use crate::surrogate::{ModuleTrace, SurrogateStack};
use crate::tensor::{log_sum_exp_unchecked, softmax_in_place};

/// `λ_α L_α + λ_A L_A + λ_KL L_KL`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_alpha: f64,
    pub lambda_a: f64,
    pub lambda_kl: f64,
}

impl LossWeights {
    pub const REGRESSION: Self = Self::new(0.1, 1.0, 0.0);
    pub const REGRESSION_DISTILL: Self = Self::new(0.1, 1.0, 2.0);
    pub const DISTILL: Self = Self::new(0.0, 0.0, 1.0);

    pub const fn new(lambda_alpha: f64, lambda_a: f64, lambda_kl: f64) -> Self {
        Self {
            lambda_alpha,
            lambda_a,
            lambda_kl,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_alpha, self.lambda_a, self.lambda_kl];
        if all.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        if all.iter().all(|&l| l == 0.0) {
            return Err(Error::InvalidConfig("all loss weights are zero".into()));
        }
        Ok(())
    }

    pub fn regression_active(&self) -> bool {
        self.lambda_alpha > 0.0 || self.lambda_a > 0.0
    }

    pub fn distill_active(&self) -> bool {
        self.lambda_kl > 0.0
    }

    pub fn combine(&self, l: &LossTerms) -> f64 {
        self.lambda_alpha * l.alpha + self.lambda_a * l.target + self.lambda_kl * l.kl
    }
}

/// Raw loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub alpha: f64,
    pub target: f64,
    pub kl: f64,
}

fn check_stack(stack: &SurrogateStack, cache: &TargetCache) -> Result<()> {
    stack.check_key(cache.header.key_hash)?;
    let h = &cache.header;
    if (stack.layers(), stack.kv_heads(), stack.group_size(), stack.head_dim()) != (h.layers, h.kv_heads, h.group_size, h.head_dim) {
        return Err(Error::InvalidConfig("surrogate stack and target cache disagree on shape".into()));
    }
    Ok(())
}

/// `(L_α, L_A)`: mean squared score error and mean squared target distance
/// over every (position, layer, query head) record of the selected
/// `(sample, position)` pairs.
pub fn loss_regression(stack: &SurrogateStack, cache: &TargetCache, positions: &[(usize, usize)]) -> Result<(f64, f64)> {
    regression_pass(stack, cache, positions, None, LossWeights::REGRESSION)
}

/// Regression terms plus their gradient (scaled by the loss weights) added
/// into `grads`.
pub fn regression_gradients(
    stack: &SurrogateStack,
    cache: &TargetCache,
    positions: &[(usize, usize)],
    weights: LossWeights,
    grads: &mut [Vec<f64>],
) -> Result<(f64, f64)> {
    regression_pass(stack, cache, positions, Some(grads), weights)
}

fn regression_pass(
    stack: &SurrogateStack,
    cache: &TargetCache,
    positions: &[(usize, usize)],
    mut grads: Option<&mut [Vec<f64>]>,
    weights: LossWeights,
) -> Result<(f64, f64)> {
    check_stack(stack, cache)?;
    if positions.is_empty() {
        return Err(Error::Empty("regression batch"));
    }
    let h = cache.header;
    let hq = h.query_heads();
    let records = (positions.len() * h.layers * hq) as f64;
    let (mut la, mut lt) = (0.0, 0.0);
    let mut trace = ModuleTrace::default();
    let mut dt = vec![0.0; h.head_dim];
    for &(s, p) in positions {
        if s >= cache.samples.len() || p >= cache.samples[s].len() {
            return Err(Error::InvalidArgument(format!("no cached position ({s}, {p})")));
        }
        for layer in 0..h.layers {
            for qh in 0..hq {
                let rec = cache.record(s, p, layer, qh);
                let id = stack.module_id(layer, qh);
                let module = &stack.modules()[id];
                let (score, target) = match grads {
                    Some(_) => module.forward_traced(rec.q, &mut trace),
                    None => module.forward(rec.q),
                };
                let ds = score - rec.alpha;
                la += ds * ds;
                for ((o, t), a) in dt.iter_mut().zip(&target).zip(rec.target) {
                    *o = t - a;
                }
                lt += dt.iter().map(|x| x * x).sum::<f64>();
                if let Some(g) = grads.as_deref_mut() {
                    let sa = 2.0 * weights.lambda_alpha / records;
                    let st = 2.0 * weights.lambda_a / records;
                    dt.iter_mut().for_each(|x| *x *= st);
                    module.backward(&trace, sa * ds, &dt, &mut g[id], None);
                }
            }
        }
    }
    Ok((la / records, lt / records))
}

/// `KL(softmax(t) ‖ softmax(s))` for logit vectors.
pub fn kl_from_logits(teacher: &[f64], student: &[f64]) -> f64 {
    let mut p = teacher.to_vec();
    softmax_in_place(&mut p);
    let lt = log_sum_exp_unchecked(teacher);
    let ls = log_sum_exp_unchecked(student);
    let kl: f64 = p
        .iter()
        .zip(teacher.iter().zip(student))
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, (&t, &s))| pi * ((t - lt) - (s - ls)))
        .sum();
    kl.max(0.0)
}

/// Mean over all positions of the selected samples of the KL from the
/// cached full-attention distribution to the blended student.
pub fn loss_distill(weights: &ModelWeights, stack: &SurrogateStack, cache: &TargetCache, samples: &[usize]) -> Result<f64> {
    check_stack(stack, cache)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for &s in samples {
        let sample = cache.samples.get(s).ok_or_else(|| Error::InvalidArgument(format!("no sample {s}")))?;
        let logits = blended_logits(weights, stack, &sample.tokens)?;
        for (p, l) in logits.iter().enumerate() {
            total += kl_from_logits(cache.teacher_logits(s, p), l);
        }
        count += sample.len();
    }
    if count == 0 {
        return Err(Error::Empty("distillation batch"));
    }
    Ok(total / count as f64)
}

/// Records the blended forward pass of `tokens` (positions `n+1..`) on
/// `tape`, returning the logits node of each position.
pub fn record_blended_forward<'a>(tape: &mut Tape<'a>, weights: &'a ModelWeights, stack: &SurrogateStack, tokens: &[u32]) -> Result<Vec<NodeId>> {
    let cfg = weights.config();
    let (d, dm, hq, hkv) = (cfg.head_dim, cfg.d_model, cfg.query_heads(), cfg.kv_heads);
    let n = stack.plan().context_len;
    let rope = weights.rope();
    let mut keys: Vec<Vec<NodeId>> = vec![Vec::new(); cfg.layers * hkv];
    let mut values: Vec<Vec<NodeId>> = vec![Vec::new(); cfg.layers * hkv];
    let mut out = Vec::with_capacity(tokens.len());
    for (i, &tok) in tokens.iter().enumerate() {
        weights.check_token(tok)?;
        let pos = n + 1 + i;
        let mut x = tape.constant(weights.embed.row(tok as usize).to_vec());
        for (l, lw) in weights.layers.iter().enumerate() {
            let xn = tape.rms_norm(x, &lw.attn_norm);
            let q_all = tape.matvec(lw.wq.data(), hq * d, dm, xn);
            let k_all = tape.matvec(lw.wk.data(), hkv * d, dm, xn);
            let v_all = tape.matvec(lw.wv.data(), hkv * d, dm, xn);
            for h in 0..hkv {
                let k = tape.slice(k_all, h * d, d);
                let k = tape.rope(k, rope, pos);
                let v = tape.slice(v_all, h * d, d);
                keys[l * hkv + h].push(k);
                values[l * hkv + h].push(v);
            }
            let mut heads = Vec::with_capacity(hq);
            for qh in 0..hq {
                let q = tape.slice(q_all, qh * d, d);
                let q = tape.rope(q, rope, pos);
                let sv = tape.module(stack.module_id(l, qh), q);
                let score = tape.slice(sv, 0, 1);
                let target = tape.slice(sv, 1, d);
                let slot = l * hkv + cfg.kv_head_of(qh);
                heads.push(tape.blend(q, score, target, keys[slot].clone(), values[slot].clone()));
            }
            let heads = tape.concat(heads);
            let proj = tape.matvec(lw.wo.data(), dm, dm, heads);
            x = tape.add(x, proj);
            let xn = tape.rms_norm(x, &lw.ffn_norm);
            let up = tape.matvec(lw.w_up.data(), cfg.ffn_dim, dm, xn);
            let up = tape.silu(up);
            let down = tape.matvec(lw.w_down.data(), dm, cfg.ffn_dim, up);
            x = tape.add(x, down);
        }
        let xn = tape.rms_norm(x, &weights.final_norm);
        out.push(tape.matvec(weights.unembed.data(), cfg.vocab, dm, xn));
    }
    Ok(out)
}

/// Sum of per-position KL over `samples` and its gradient, scaled by
/// `scale`, added into `grads`. Returns `(KL sum, position count)`.
pub fn distill_gradients(
    weights: &ModelWeights,
    stack: &SurrogateStack,
    cache: &TargetCache,
    samples: &[usize],
    scale: f64,
    grads: &mut [Vec<f64>],
) -> Result<(f64, usize)> {
    check_stack(stack, cache)?;
    check_dim("distill_gradients groups", stack.module_count(), grads.len())?;
    let mut total = 0.0;
    let mut count = 0;
    for &s in samples {
        let sample = cache.samples.get(s).ok_or_else(|| Error::InvalidArgument(format!("no sample {s}")))?;
        let mut tape = Tape::with_stack(stack);
        let logits = record_blended_forward(&mut tape, weights, stack, &sample.tokens)?;
        let kls: Vec<NodeId> = logits
            .iter()
            .enumerate()
            .map(|(p, &l)| tape.kl_to_teacher(cache.teacher_logits(s, p), l))
            .collect();
        let sum = tape.sum(kls);
        total += tape.scalar(sum);
        count += sample.len();
        if scale != 0.0 {
            let g = tape.backward(sum, scale)?;
            for (acc, m) in grads.iter_mut().zip(&g.modules) {
                crate::tensor::axpy(acc, 1.0, m);
            }
        }
    }
    Ok((total, count))
}
