//! Wall-clock and memory comparison of full-cache and summarized decoding.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::blend::{BlendSession, ContextSummary};
use crate::error::{Error, Result};
use crate::model::{KVCache, ModelWeights};
use crate::surrogate::SurrogateStack;
use crate::tensor::{Matrix, Prng};

/// Presents a summary as if it stood for a context of `context_len` tokens.
/// Only positions change; the summary itself is reused as is.
pub struct AtContextLength<'a, S: ContextSummary + ?Sized> {
    pub inner: &'a S,
    pub context_len: usize,
}

impl<S: ContextSummary + ?Sized> ContextSummary for AtContextLength<'_, S> {
    fn context_len(&self) -> usize {
        self.context_len
    }

    fn summarize(&self, layer: usize, query_head: usize, q: &[f64]) -> (f64, Vec<f64>) {
        self.inner.summarize(layer, query_head, q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchOptions {
    pub repeats: usize,
    pub warmup: usize,
    /// Tokens decoded per timed repetition.
    pub decode_tokens: usize,
    /// Time a real prefill for TTFT. When off, the full cache is filled with
    /// random keys and values and only decode timings are reported.
    pub prefill: bool,
    /// Prefill is quadratic in `n`; it gets its own repetition count.
    pub prefill_repeats: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repeats: 5,
            warmup: 1,
            decode_tokens: 16,
            prefill: true,
            prefill_repeats: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub context_len: usize,
    pub full_ttft_ms: Option<f64>,
    pub full_step_ms: f64,
    pub full_tokens_per_s: f64,
    pub surrogate_ttft_ms: f64,
    pub surrogate_step_ms: f64,
    pub surrogate_tokens_per_s: f64,
    pub full_memory_bytes: usize,
    pub surrogate_memory_bytes: usize,
}

/// `2·n·L·H_kv·d` doubles.
pub fn full_cache_memory_bytes(weights: &ModelWeights, n: usize) -> usize {
    let c = weights.config();
    2 * n * c.layers * c.kv_heads * c.head_dim * std::mem::size_of::<f64>()
}

pub fn stack_memory_bytes(stack: &SurrogateStack) -> usize {
    stack.total_params() * std::mem::size_of::<f64>()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Runs `f` `warmup` times untimed and `repeats` times timed, returning the
/// median of the per-call durations it reports (seconds).
fn timed(warmup: usize, repeats: usize, mut f: impl FnMut() -> Result<f64>) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut xs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        xs.push(f()?);
    }
    Ok(median(xs))
}

fn random_cache(weights: &ModelWeights, n: usize, rng: &mut Prng) -> Result<KVCache> {
    let c = weights.config();
    let slots = c.layers * c.kv_heads;
    let keys = (0..slots).map(|_| Matrix::random_normal(n, c.head_dim, 1.0, rng)).collect();
    let values = (0..slots).map(|_| Matrix::random_normal(n, c.head_dim, 1.0, rng)).collect();
    KVCache::from_parts(c.layers, c.kv_heads, (1..=n).collect(), keys, values)
}

/// Decodes `tokens` once against `stack` placed at context length `n`;
/// returns (seconds to the first token, total seconds).
pub fn time_surrogate_decode(weights: &ModelWeights, stack: &SurrogateStack, n: usize, tokens: &[u32]) -> Result<(f64, f64)> {
    let summary = AtContextLength { inner: stack, context_len: n };
    let mut session = BlendSession::new(weights, &summary);
    let t0 = Instant::now();
    let mut ttft = None;
    for &t in tokens {
        session.decode(t)?;
        ttft.get_or_insert_with(|| t0.elapsed().as_secs_f64());
    }
    let total = t0.elapsed().as_secs_f64();
    Ok((ttft.ok_or_else(|| Error::InvalidArgument("no tokens to decode".into()))?, total))
}

/// Benchmarks decoding after contexts of each length in `sizes`, with the
/// same surrogate stack standing in for every context.
pub fn bench(weights: &ModelWeights, stack: &SurrogateStack, sizes: &[usize], opts: &BenchOptions) -> Result<Vec<BenchPoint>> {
    if opts.repeats == 0 || opts.decode_tokens == 0 || (opts.prefill && opts.prefill_repeats == 0) {
        return Err(Error::InvalidArgument("bench needs at least one repetition and one token".into()));
    }
    let vocab = weights.config().vocab;
    let root = Prng::new(opts.seed);
    let mut out = Vec::with_capacity(sizes.len());
    for (i, &n) in sizes.iter().enumerate() {
        if n == 0 {
            return Err(Error::InvalidArgument("bench context length must be positive".into()));
        }
        let mut rng = root.split(i as u64);
        let context: Vec<u32> = (0..n).map(|_| rng.below(vocab) as u32).collect();
        let tokens: Vec<u32> = (0..opts.decode_tokens).map(|_| rng.below(vocab) as u32).collect();

        let (cache, full_ttft_ms) = if opts.prefill {
            let mut cache = None;
            let secs = timed(0, opts.prefill_repeats, || {
                let t0 = Instant::now();
                let p = weights.prefill(&context)?;
                let dt = t0.elapsed().as_secs_f64();
                cache = Some(p.cache);
                Ok(dt)
            })?;
            (cache.expect("prefill ran"), Some(secs * 1e3))
        } else {
            (random_cache(weights, n, &mut rng)?, None)
        };

        let full_secs = timed(opts.warmup, opts.repeats, || {
            let mut c = cache.clone();
            let t0 = Instant::now();
            for (j, &t) in tokens.iter().enumerate() {
                weights.decode_step_full(&mut c, t, n + 1 + j)?;
            }
            Ok(t0.elapsed().as_secs_f64())
        })?;

        let mut first = Vec::with_capacity(opts.repeats);
        let sur_secs = timed(opts.warmup, opts.repeats, || {
            let (ttft, total) = time_surrogate_decode(weights, stack, n, &tokens)?;
            first.push(ttft);
            Ok(total)
        })?;
        let sur_ttft = median(first.split_off(opts.warmup.min(first.len())));

        let per_tok = |secs: f64| secs / opts.decode_tokens as f64;
        out.push(BenchPoint {
            context_len: n,
            full_ttft_ms,
            full_step_ms: per_tok(full_secs) * 1e3,
            full_tokens_per_s: 1.0 / per_tok(full_secs),
            surrogate_ttft_ms: sur_ttft * 1e3,
            surrogate_step_ms: per_tok(sur_secs) * 1e3,
            surrogate_tokens_per_s: 1.0 / per_tok(sur_secs),
            full_memory_bytes: full_cache_memory_bytes(weights, n),
            surrogate_memory_bytes: stack_memory_bytes(stack),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn timed_skips_warmup() {
        let mut calls = 0;
        let m = timed(1, 3, || {
            calls += 1;
            Ok(if calls == 1 { 100.0 } else { calls as f64 })
        })
        .unwrap();
        assert_eq!(calls, 4);
        assert_eq!(m, 3.0);
    }
}
