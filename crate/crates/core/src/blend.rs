//! Decoding with a context summary in place of the long-context cache.
//!
//! Each (layer, query head) attends over the locally generated tokens plus
//! one virtual entry whose logit is the context score and whose value is the
//! context target, all through a single max-shifted softmax. With the exact
//! score and target this equals attention over the full cache.

use crate::error::{check_dim, Error, Result};
use crate::model::{AttentionProvider, KVCache, ModelWeights};
use crate::oracle::alpha_and_target_rows;
use crate::surrogate::SurrogateStack;
use crate::tensor::{axpy, dot, softmax_in_place, Matrix, Vector};

/// Scores below this stand for "no context mass".
pub const SCORE_FLOOR: f64 = -1e6;

/// Produces the context score and target for a rotated query.
pub trait ContextSummary {
    fn context_len(&self) -> usize;
    fn summarize(&self, layer: usize, query_head: usize, q: &[f64]) -> (f64, Vec<f64>);
}

impl ContextSummary for SurrogateStack {
    fn context_len(&self) -> usize {
        self.plan().context_len
    }

    fn summarize(&self, layer: usize, query_head: usize, q: &[f64]) -> (f64, Vec<f64>) {
        self.module_for_query(layer, query_head).forward(q)
    }
}

/// Exact score and target computed from the context cache.
pub struct OracleSummary<'a> {
    cache: &'a KVCache,
    group_size: usize,
}

impl<'a> OracleSummary<'a> {
    pub fn new(cache: &'a KVCache, group_size: usize) -> Self {
        Self { cache, group_size }
    }
}

impl ContextSummary for OracleSummary<'_> {
    fn context_len(&self) -> usize {
        self.cache.len()
    }

    fn summarize(&self, layer: usize, query_head: usize, q: &[f64]) -> (f64, Vec<f64>) {
        let h = query_head / self.group_size;
        let k = self.cache.keys(layer, h);
        let v = self.cache.values(layer, h);
        let mut scratch = Vec::with_capacity(k.rows());
        let mut target = vec![0.0; q.len()];
        let alpha = alpha_and_target_rows(q, k, v, k.rows(), &mut scratch, &mut target);
        (alpha, target)
    }
}

/// Softmax weights over `[score ∥ local_logits]`, written into `weights`.
pub fn blend_weights(score: f64, local_logits: &[f64], weights: &mut Vec<f64>) {
    weights.clear();
    weights.push(score.max(SCORE_FLOOR));
    weights.extend_from_slice(local_logits);
    softmax_in_place(weights);
}

/// Blended output for precomputed local logits (already scaled by `1/√d`).
pub fn blend_attend(score: f64, target: &[f64], local_logits: &[f64], local_values: &Matrix) -> Result<Vector> {
    if !score.is_finite() {
        return Err(Error::NonFinite("blend_attend score"));
    }
    check_dim("blend_attend (local values)", local_logits.len(), local_values.rows())?;
    if local_values.rows() > 0 {
        check_dim("blend_attend (value width)", target.len(), local_values.cols())?;
    }
    let mut w = Vec::with_capacity(local_logits.len() + 1);
    blend_weights(score, local_logits, &mut w);
    let mut out = vec![0.0; target.len()];
    axpy(&mut out, w[0], target);
    for (j, &wj) in w[1..].iter().enumerate() {
        axpy(&mut out, wj, local_values.row(j));
    }
    Ok(Vector(out))
}

/// Attention provider blending a context summary with a local cache holding
/// positions `n+1..=t`. A non-finite summary is recorded and reported by
/// [`BlendedAttention::finish`].
pub struct BlendedAttention<'a, S: ContextSummary + ?Sized> {
    summary: &'a S,
    local: &'a mut KVCache,
    scratch: Vec<f64>,
    failed: bool,
}

impl<'a, S: ContextSummary + ?Sized> BlendedAttention<'a, S> {
    pub fn new(summary: &'a S, local: &'a mut KVCache) -> Self {
        Self {
            summary,
            local,
            scratch: Vec::new(),
            failed: false,
        }
    }

    pub fn finish(self) -> Result<()> {
        if self.failed {
            return Err(Error::NonFinite("context summary"));
        }
        Ok(())
    }
}

impl<S: ContextSummary + ?Sized> AttentionProvider for BlendedAttention<'_, S> {
    fn begin(&mut self, pos: usize) -> Result<()> {
        if pos <= self.summary.context_len() {
            return Err(Error::PositionRegression {
                last: self.summary.context_len(),
                got: pos,
            });
        }
        self.local.begin_position(pos)
    }

    fn push_kv(&mut self, layer: usize, kv_head: usize, k: &[f64], v: &[f64]) {
        self.local.push(layer, kv_head, k, v);
    }

    fn attend(&mut self, layer: usize, query_head: usize, kv_head: usize, q: &[f64], out: &mut [f64]) {
        let (score, target) = self.summary.summarize(layer, query_head, q);
        if !score.is_finite() || target.iter().any(|x| !x.is_finite()) {
            self.failed = true;
        }
        let k = self.local.keys(layer, kv_head);
        let v = self.local.values(layer, kv_head);
        let scale = 1.0 / (q.len() as f64).sqrt();
        self.scratch.clear();
        self.scratch.push(score.max(SCORE_FLOOR));
        self.scratch.extend((0..k.rows()).map(|j| scale * dot(q, k.row(j))));
        softmax_in_place(&mut self.scratch);
        out.fill(0.0);
        axpy(out, self.scratch[0], &target);
        for j in 0..k.rows() {
            axpy(out, self.scratch[j + 1], v.row(j));
        }
    }
}

/// Autoregressive state after a summarized context of length `n`.
pub struct BlendSession<'a, S: ContextSummary + ?Sized> {
    weights: &'a ModelWeights,
    summary: &'a S,
    local: KVCache,
    position: usize,
}

impl<'a, S: ContextSummary + ?Sized> BlendSession<'a, S> {
    pub fn new(weights: &'a ModelWeights, summary: &'a S) -> Self {
        Self {
            weights,
            summary,
            local: KVCache::new(weights.config()),
            position: summary.context_len(),
        }
    }

    /// Current position `t`; the local cache holds `n+1..=t`.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn local_cache(&self) -> &KVCache {
        &self.local
    }

    /// Feeds `token` at position `t+1` and returns its next-token logits.
    pub fn decode(&mut self, token: u32) -> Result<Vector> {
        self.weights.check_token(token)?;
        let pos = self.position + 1;
        let mut provider = BlendedAttention::new(self.summary, &mut self.local);
        let (_, logits) = self.weights.forward_token(token, pos, &mut provider, true)?;
        provider.finish()?;
        self.position = pos;
        Ok(logits.expect("logits requested"))
    }

    /// Greedy continuation: feeds `prompt`, then generates `steps` tokens.
    pub fn generate_greedy(&mut self, prompt: &[u32], steps: usize) -> Result<Vec<u32>> {
        let mut logits = None;
        for &t in prompt {
            logits = Some(self.decode(t)?);
        }
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let l = logits.ok_or(Error::Empty("generate_greedy prompt"))?;
            let next = crate::tensor::argmax(&l) as u32;
            out.push(next);
            logits = Some(self.decode(next)?);
        }
        Ok(out)
    }
}

/// Teacher-forced logits for `tokens` following the summarized context.
pub fn blended_logits<S: ContextSummary + ?Sized>(weights: &ModelWeights, summary: &S, tokens: &[u32]) -> Result<Vec<Vector>> {
    let mut session = BlendSession::new(weights, summary);
    tokens.iter().map(|&t| session.decode(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Prng;

    #[test]
    fn empty_local_returns_target() {
        let t = [0.25, -1.5, 3.0];
        let out = blend_attend(7.0, &t, &[], &Matrix::zeros(0, 3)).unwrap();
        assert_eq!(out.0, t.to_vec());
    }

    #[test]
    fn floor_score_gives_local_attention() {
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let logits = [0.3, -0.4];
        let out = blend_attend(-1e9, &[100.0, 100.0], &logits, &v).unwrap();
        let mut w = logits.to_vec();
        softmax_in_place(&mut w);
        assert!((out[0] - w[0]).abs() < 1e-15 && (out[1] - 2.0 * w[1]).abs() < 1e-15);
        assert!(blend_attend(f64::NAN, &[0.0, 0.0], &logits, &v).is_err());
    }

    #[test]
    fn two_term_softmax_matches_brute_force() {
        let (a, s) = (0.7, -0.2);
        let target = [1.0, -2.0];
        let v = Matrix::from_rows(&[vec![0.5, 4.0]]).unwrap();
        let out = blend_attend(a, &target, &[s], &v).unwrap();
        let (ea, es) = (f64::exp(a), f64::exp(s));
        for c in 0..2 {
            let want = (ea * target[c] + es * v.get(0, c)) / (ea + es);
            assert!((out[c] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_normalized_and_monotone_in_score() {
        let mut rng = Prng::new(4);
        let logits: Vec<f64> = (0..9).map(|_| 3.0 * rng.normal()).collect();
        let mut prev = 0.0;
        let mut w = Vec::new();
        for i in 0..40 {
            let score = -10.0 + 0.5 * i as f64;
            blend_weights(score, &logits, &mut w);
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w[0] > prev);
            prev = w[0];
        }
    }

    #[test]
    fn oracle_mode_reproduces_full_decode() {
        let cfg = ModelConfig {
            layers: 2,
            kv_heads: 2,
            group_size: 2,
            head_dim: 8,
            d_model: 32,
            vocab: 64,
            ffn_dim: 48,
            seed: 3,
            ..ModelConfig::default()
        };
        let w = ModelWeights::init(&cfg).unwrap();
        let mut rng = Prng::new(8);
        let ctx: Vec<u32> = (0..40).map(|_| rng.below(64) as u32).collect();
        let query: Vec<u32> = (0..12).map(|_| rng.below(64) as u32).collect();
        let pre = w.prefill(&ctx).unwrap();
        let full = w.continue_full(&pre.cache, &query).unwrap();
        let oracle = OracleSummary::new(&pre.cache, cfg.group_size);
        let blended = blended_logits(&w, &oracle, &query).unwrap();
        for (a, b) in full.iter().zip(&blended) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-10 * x.abs().max(1e-3), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn session_rejects_bad_tokens_and_tracks_position() {
        let cfg = ModelConfig::default();
        let w = ModelWeights::init(&cfg).unwrap();
        let pre = w.prefill(&[5, 6, 7]).unwrap();
        let oracle = OracleSummary::new(&pre.cache, cfg.group_size);
        let mut s = BlendSession::new(&w, &oracle);
        assert_eq!(s.position(), 3);
        assert!(s.decode(cfg.vocab as u32).is_err());
        s.decode(9).unwrap();
        s.decode(10).unwrap();
        assert_eq!(s.position(), 5);
        assert_eq!(s.local_cache().positions(), &[4, 5]);
        let mut a = BlendSession::new(&w, &oracle);
        let mut b = BlendSession::new(&w, &oracle);
        assert_eq!(a.generate_greedy(&[1, 2], 6).unwrap(), b.generate_greedy(&[1, 2], 6).unwrap());
    }
}
