use super::*;
use crate::blend::OracleSummary;
use crate::model::{ModelConfig, Prefill};
use crate::oracle::{cache_targets, QuerySample, SampleTargets, TargetHeader};
use crate::surrogate::{init_surrogate_stack, multiplier_groups, plan_capacity, Depths, SurrogateFamily};
use crate::tensor::Prng;

struct Fixture {
    weights: ModelWeights,
    prefill: Prefill,
    cache: TargetCache,
}

fn fixture() -> Fixture {
    let cfg = ModelConfig {
        layers: 2,
        kv_heads: 1,
        group_size: 2,
        head_dim: 4,
        d_model: 8,
        vocab: 20,
        ffn_dim: 16,
        seed: 5,
        ..ModelConfig::default()
    };
    let weights = ModelWeights::init(&cfg).unwrap();
    let mut rng = Prng::new(8);
    let context: Vec<u32> = (0..40).map(|_| rng.below(20) as u32).collect();
    let samples: Vec<QuerySample> = (0..4)
        .map(|i| QuerySample {
            id: i,
            tokens: (0..5).map(|_| rng.below(20) as u32).collect(),
        })
        .collect();
    let prefill = weights.prefill(&context).unwrap();
    let cache = cache_targets(&weights, &context, &prefill.cache, &samples, None).unwrap();
    Fixture { weights, prefill, cache }
}

#[test]
fn oracle_summary_has_zero_gaps() {
    let f = fixture();
    let oracle = OracleSummary::new(&f.prefill.cache, 2);
    let all: Vec<usize> = (0..f.cache.samples.len()).collect();
    for labels in [LabelSource::FullArgmax, LabelSource::NextToken] {
        let m = agreement(&f.weights, &oracle, &f.cache, &all, labels).unwrap();
        assert_eq!(m.token_accuracy_gap, 0.0);
        assert!(m.lm_ce_gap.abs() <= 1e-10, "{}", m.lm_ce_gap);
        assert!(m.eval_kl.abs() <= 1e-10, "{}", m.eval_kl);
    }
    let m = agreement(&f.weights, &oracle, &f.cache, &all, LabelSource::FullArgmax).unwrap();
    assert_eq!(m.acc_full, 100.0);
    assert_eq!(m.positions, 20);
}

#[test]
fn sample_order_does_not_change_metrics() {
    let f = fixture();
    let cfg = f.weights.config();
    let plan = plan_capacity(0.5, 40, cfg.head_dim, cfg.layers, &multiplier_groups(cfg.layers, &[1.0])).unwrap();
    let stack = init_surrogate_stack(SurrogateFamily::Quadrature, &plan, cfg, &f.prefill.cache, f.cache.header.key_hash, 0).unwrap();
    let a = agreement(&f.weights, &stack, &f.cache, &[0, 1, 2, 3], LabelSource::FullArgmax).unwrap();
    let b = agreement(&f.weights, &stack, &f.cache, &[3, 1, 0, 2], LabelSource::FullArgmax).unwrap();
    assert_eq!(a.token_accuracy_gap, b.token_accuracy_gap);
    assert!((a.lm_ce_gap - b.lm_ce_gap).abs() < 1e-12);
    assert!((a.eval_kl - b.eval_kl).abs() < 1e-12);
    assert!(a.eval_kl > 0.0);
}

/// Two-position, vocab-3 cache with hand-chosen logits.
fn tiny_cache(teacher: Vec<f64>, tokens: Vec<u32>) -> TargetCache {
    let header = TargetHeader {
        key_hash: 1,
        n: 4,
        layers: 1,
        kv_heads: 1,
        group_size: 1,
        head_dim: 1,
        vocab: 3,
    };
    let len = tokens.len();
    let s = SampleTargets::from_parts(0, tokens, vec![0.0; len], vec![1.0; len], vec![0.0; len], teacher).unwrap();
    TargetCache { header, samples: vec![s] }
}

#[test]
fn hand_computed_agreement() {
    // teacher argmax: pos0 → 2, pos1 → 0; student argmax: pos0 → 2, pos1 → 1.
    let cache = tiny_cache(vec![0.0, 1.0, 2.0, 3.0, 0.0, 0.0], vec![0, 1]);
    let student = vec![vec![Vector(vec![0.0, 0.0, 1.0]), Vector(vec![0.0, 1.0, 0.0])]];
    let m = agreement_from_logits(&cache, &[0], &student, LabelSource::FullArgmax).unwrap();
    assert_eq!(m.acc_full, 100.0);
    assert_eq!(m.acc_surrogate, 50.0);
    assert_eq!(m.token_accuracy_gap, 50.0);
    // Constant logits predict token 0, which matches the label at pos1 only.
    assert_eq!(m.acc_constant, 50.0);
    // Only pos0 has a next token (1).
    let lse = |v: &[f64]| v.iter().map(|x| x.exp()).sum::<f64>().ln();
    let ce_full = lse(&[0.0, 1.0, 2.0]) - 1.0;
    let ce_sur = lse(&[0.0, 0.0, 1.0]) - 0.0;
    assert!((m.lm_ce_gap - (ce_sur - ce_full)).abs() < 1e-14);

    let m = agreement_from_logits(&cache, &[0], &student, LabelSource::NextToken).unwrap();
    assert_eq!(m.acc_full, 0.0);
    assert_eq!(m.acc_surrogate, 0.0);
}

#[test]
fn fixed_ratio_predictor_gives_log_ratio_per_head() {
    let f = fixture();
    let c: f64 = 0.3;
    let pos = f.cache.positions();
    let r = rte_with(&f.cache, &pos, |l, qh, q| {
        // Locate the record whose query this is to build an exact-ratio prediction.
        let (s, p) = pos.iter().copied().find(|&(s, p)| f.cache.record(s, p, l, qh).q == q).unwrap();
        let rec = f.cache.record(s, p, l, qh);
        let t: Vec<f64> = rec.target.iter().zip(q).map(|(a, x)| a + c * (x - a)).collect();
        (rec.alpha * (1.0 + c), t)
    })
    .unwrap();
    let heads = 2.0 * 2.0;
    let expect = heads * (c * c).ln();
    assert!((r.rte_target - expect).abs() < 1e-9, "{} vs {expect}", r.rte_target);
    assert!((r.rte_score - expect).abs() < 1e-9);
    assert_eq!(r.heads.len(), 4);
    assert_eq!(r.records, 4 * pos.len());
    assert_eq!(r.floored_target + r.excluded_target, 0);
}

#[test]
fn exact_predictions_hit_the_floor() {
    let f = fixture();
    let pos = f.cache.positions();
    let oracle = OracleSummary::new(&f.prefill.cache, 2);
    let r = rte_with(&f.cache, &pos, |l, qh, q| oracle.summarize(l, qh, q)).unwrap();
    // Exact up to rounding: every sample is either floored or far below zero.
    assert!(r.rte_target < -40.0 * 4.0, "{}", r.rte_target);
    assert!(r.rte_target >= RTE_LOG_FLOOR * 4.0);
}

#[test]
fn floor_and_exclusions_are_counted() {
    assert_eq!(target_log_ratio(&[1.0], &[1.0], &[2.0]), Some((RTE_LOG_FLOOR, true)));
    assert_eq!(target_log_ratio(&[0.0], &[1.0], &[1.0]), None);
    assert_eq!(score_log_ratio(3.0, 0.0), None);
    let (v, floored) = score_log_ratio(3.0, 2.0).unwrap();
    assert!(!floored && (v - (0.25f64).ln()).abs() < 1e-15);

    let cache = tiny_cache(vec![0.0; 6], vec![0, 1]);
    let r = rte_with(&cache, &cache.positions(), |_, _, _| (1.0, vec![0.0])).unwrap();
    // q == target == 0 everywhere: target term excluded, score term exact.
    assert_eq!(r.excluded_target, 2);
    assert_eq!(r.floored_score, 2);
    assert_eq!(r.rte_target, 0.0);
    assert_eq!(r.rte_score, RTE_LOG_FLOOR);
}

#[test]
fn stack_rte_rejects_foreign_cache() {
    let f = fixture();
    let cfg = f.weights.config();
    let plan = plan_capacity(0.5, 40, cfg.head_dim, cfg.layers, &multiplier_groups(cfg.layers, &[1.0])).unwrap();
    let stack = init_surrogate_stack(SurrogateFamily::mlp(Depths::new(0, 1, 1)), &plan, cfg, &f.prefill.cache, 999, 0).unwrap();
    assert!(rte(&stack, &f.cache, &f.cache.positions()).is_err());
}

#[test]
fn bench_reports_memory_and_positive_timings() {
    let f = fixture();
    let cfg = f.weights.config();
    let plan = plan_capacity(0.5, 40, cfg.head_dim, cfg.layers, &multiplier_groups(cfg.layers, &[1.0])).unwrap();
    let stack = init_surrogate_stack(SurrogateFamily::Quadrature, &plan, cfg, &f.prefill.cache, 1, 0).unwrap();
    let opts = BenchOptions { repeats: 1, warmup: 0, decode_tokens: 2, ..BenchOptions::default() };
    let pts = bench(&f.weights, &stack, &[8, 16], &opts).unwrap();
    assert_eq!(pts.len(), 2);
    assert_eq!(pts[1].full_memory_bytes, 2 * 16 * 2 * 4 * 8);
    assert_eq!(pts[0].surrogate_memory_bytes, stack.total_params() * 8);
    assert!(pts.iter().all(|p| p.full_step_ms > 0.0 && p.surrogate_step_ms > 0.0 && p.full_ttft_ms.is_some()));
    let no_prefill = BenchOptions { prefill: false, ..opts };
    assert!(bench(&f.weights, &stack, &[8], &no_prefill).unwrap()[0].full_ttft_ms.is_none());
}
