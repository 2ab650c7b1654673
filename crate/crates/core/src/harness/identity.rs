//! Exactness checks that must hold for any model and context: with the true
//! context score and target, blended decoding is full attention.

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::blend::{blend_attend, blended_logits, OracleSummary};
use crate::error::Result;
use crate::eval::{agreement_from_logits, LabelSource};
use crate::model::ModelWeights;
use crate::oracle::{cache_targets, score_alpha, target_a, verify_targets};
use crate::surrogate::QuadratureModule;
use crate::taskgen::{gen_corpus, Split};
use crate::tensor::{Matrix, Vector};

pub const IDENTITY_TOLERANCE: f64 = 1e-10;
const MAX_SAMPLES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub name: String,
    pub max_deviation: f64,
    pub tolerance: f64,
}

impl IdentityCheck {
    fn new(name: &str, max_deviation: f64) -> Self {
        Self { name: name.into(), max_deviation, tolerance: IDENTITY_TOLERANCE }
    }

    pub fn passed(&self) -> bool {
        self.max_deviation <= self.tolerance
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, |m: f64, d| if d.is_nan() { f64::INFINITY } else { m.max(d) })
}

/// Runs the exactness suite on the model and corpus described by `cfg`.
pub fn identity_check(cfg: &RunConfig) -> Result<Vec<IdentityCheck>> {
    cfg.validate()?;
    let weights = ModelWeights::init(&cfg.model)?;
    let c = &cfg.corpus;
    let corpus = gen_corpus(c.seed, c.context_len, c.facts, cfg.model.vocab)?.with_pairs(c.pairs_per_fact, &c.mix)?;
    let prefill = weights.prefill(&corpus.context)?;
    let mut samples = corpus.query_samples(Split::Train);
    samples.truncate(MAX_SAMPLES);
    let group = cfg.model.group_size;
    let oracle = OracleSummary::new(&prefill.cache, group);
    let mut checks = Vec::new();

    let mut dev: f64 = 0.0;
    let mut student = Vec::with_capacity(samples.len());
    for s in &samples {
        let blended = blended_logits(&weights, &oracle, &s.tokens)?;
        let full = weights.continue_full(&prefill.cache, &s.tokens)?;
        for (b, f) in blended.iter().zip(&full) {
            dev = dev.max(max_abs_diff(&b.0, &f.0));
        }
        student.push(blended);
    }
    checks.push(IdentityCheck::new("blended decode with the exact context summary equals full-cache decode", dev));

    let cache = cache_targets(&weights, &corpus.context, &prefill.cache, &samples, None)?;
    let report = verify_targets(&weights, &corpus.context, &cache, 16, cfg.corpus.seed)?;
    checks.push(IdentityCheck::new("cached scores and targets re-derive from a fresh prefill", report.max_abs_deviation));

    let n = prefill.cache.len();
    let mut dev: f64 = 0.0;
    let h = cache.header;
    for layer in 0..h.layers {
        for kv in 0..h.kv_heads {
            let quad = QuadratureModule::from_cache(&prefill.cache, layer, kv, n)?;
            let (k, v) = (prefill.cache.keys(layer, kv), prefill.cache.values(layer, kv));
            for (s, p) in cache.positions() {
                for g in 0..h.group_size {
                    let rec = cache.record(s, p, layer, kv * h.group_size + g);
                    dev = dev.max((quad.score(rec.q) - score_alpha(rec.q, k)?).abs());
                    dev = dev.max(max_abs_diff(&quad.target(rec.q), &target_a(rec.q, k, v)?.0));
                }
            }
        }
    }
    checks.push(IdentityCheck::new("quadrature over every cached entry reproduces score and target", dev));

    let target = [0.5, -1.25, 2.0];
    let out = blend_attend(3.0, &target, &[], &Matrix::zeros(0, target.len()))?;
    checks.push(IdentityCheck::new("blending with no local tokens returns the context target", max_abs_diff(&out.0, &target)));

    let idx: Vec<usize> = (0..samples.len()).collect();
    let student: Vec<Vec<Vector>> = student;
    let m = agreement_from_logits(&cache, &idx, &student, LabelSource::FullArgmax)?;
    let gap_dev = m.token_accuracy_gap.abs().max(m.lm_ce_gap.abs()).max(m.eval_kl.abs());
    checks.push(IdentityCheck::new("evaluation gaps vanish under the exact context summary", gap_dev));
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::CorpusSpec;
    use crate::model::ModelConfig;

    #[test]
    fn small_config_passes_every_check() {
        let cfg = RunConfig {
            model: ModelConfig { layers: 2, kv_heads: 1, group_size: 2, head_dim: 4, d_model: 8, vocab: 40, ffn_dim: 16, ..ModelConfig::default() },
            corpus: CorpusSpec { context_len: 48, facts: 3, pairs_per_fact: 2, ..CorpusSpec::default() },
            ..RunConfig::default()
        };
        let checks = identity_check(&cfg).unwrap();
        assert_eq!(checks.len(), 5);
        for c in &checks {
            assert!(c.passed(), "{}: {}", c.name, c.max_deviation);
        }
    }

    #[test]
    fn nan_counts_as_violation() {
        assert_eq!(max_abs_diff(&[f64::NAN], &[0.0]), f64::INFINITY);
        assert_eq!(max_abs_diff(&[1.0], &[1.0, 2.0]), f64::INFINITY);
    }
}
