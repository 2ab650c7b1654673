use crate::error::{check_dim, Error, Result};
use crate::tensor::{axpy, dot, matvec_into, silu, softmax_in_place, Matrix, Vector};

use super::{KVCache, ModelWeights, RMS_EPS};

/// Supplies the attention output for each (layer, query head) of a token.
///
/// The forward pass calls `begin` once per token, then for every layer pushes
/// the token's rotated keys and values for all KV heads before asking for
/// any query head's output, so the current token attends to itself.
pub trait AttentionProvider {
    fn begin(&mut self, pos: usize) -> Result<()>;
    fn push_kv(&mut self, layer: usize, kv_head: usize, k: &[f64], v: &[f64]);
    fn attend(&mut self, layer: usize, query_head: usize, kv_head: usize, q: &[f64], out: &mut [f64]);
}

/// Exact causal attention over everything in a [`KVCache`].
pub struct FullCacheAttention<'a> {
    pub cache: &'a mut KVCache,
    scratch: Vec<f64>,
}

impl<'a> FullCacheAttention<'a> {
    pub fn new(cache: &'a mut KVCache) -> Self {
        Self {
            cache,
            scratch: Vec::new(),
        }
    }
}

impl AttentionProvider for FullCacheAttention<'_> {
    fn begin(&mut self, pos: usize) -> Result<()> {
        self.cache.begin_position(pos)
    }

    fn push_kv(&mut self, layer: usize, kv_head: usize, k: &[f64], v: &[f64]) {
        self.cache.push(layer, kv_head, k, v);
    }

    fn attend(&mut self, layer: usize, _qh: usize, kv_head: usize, q: &[f64], out: &mut [f64]) {
        let k = self.cache.keys(layer, kv_head);
        let v = self.cache.values(layer, kv_head);
        attend_rows(q, k, v, k.rows(), &mut self.scratch, out);
    }
}

/// Softmax attention of `q` over the first `rows` rows of `(k, v)`, with the
/// `1/√d` logit scale. `scratch` is reused for the logit vector.
#[inline]
pub fn attend_rows(q: &[f64], k: &Matrix, v: &Matrix, rows: usize, scratch: &mut Vec<f64>, out: &mut [f64]) {
    let d = q.len();
    let scale = 1.0 / (d as f64).sqrt();
    scratch.clear();
    scratch.extend((0..rows).map(|j| scale * dot(q, k.row(j))));
    softmax_in_place(scratch);
    out.fill(0.0);
    for (j, &w) in scratch.iter().enumerate() {
        axpy(out, w, v.row(j));
    }
}

/// `softmax(K q / √d)ᵀ V`.
pub fn attend_full(q: &[f64], k: &Matrix, v: &Matrix) -> Result<Vector> {
    if k.rows() == 0 {
        return Err(Error::Empty("attend_full"));
    }
    check_dim("attend_full (key width)", q.len(), k.cols())?;
    check_dim("attend_full (value rows)", k.rows(), v.rows())?;
    let mut out = vec![0.0; v.cols()];
    let mut scratch = Vec::with_capacity(k.rows());
    attend_rows(q, k, v, k.rows(), &mut scratch, &mut out);
    Ok(Vector(out))
}

pub(crate) fn rms_norm(x: &[f64], gain: &[f64], out: &mut [f64]) {
    let ms = dot(x, x) / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    for ((o, xi), g) in out.iter_mut().zip(x).zip(gain) {
        *o = xi * inv * g;
    }
}

/// Result of running the model over a context.
#[derive(Debug, Clone)]
pub struct Prefill {
    pub cache: KVCache,
    /// Final residual-stream state per position, `n × d_model`.
    pub hidden: Matrix,
    /// Next-token logits at the last context position.
    pub last_logits: Vector,
}

impl ModelWeights {
    /// Runs one token at `pos` through every layer, delegating attention to
    /// `provider`. Returns the final residual state and, if requested, the
    /// next-token logits.
    pub fn forward_token<P: AttentionProvider + ?Sized>(
        &self,
        token: u32,
        pos: usize,
        provider: &mut P,
        want_logits: bool,
    ) -> Result<(Vec<f64>, Option<Vector>)> {
        self.check_token(token)?;
        let cfg = self.config();
        let dm = cfg.d_model;
        let d = cfg.head_dim;
        let hq = cfg.query_heads();
        provider.begin(pos)?;

        let mut x = self.embed.row(token as usize).to_vec();
        let mut xn = vec![0.0; dm];
        let mut q = vec![0.0; hq * d];
        let mut k = vec![0.0; cfg.kv_heads * d];
        let mut v = vec![0.0; cfg.kv_heads * d];
        let mut heads = vec![0.0; dm];
        let mut proj = vec![0.0; dm];
        let mut up = vec![0.0; cfg.ffn_dim];
        let rope = self.rope();

        for (l, lw) in self.layers.iter().enumerate() {
            rms_norm(&x, &lw.attn_norm, &mut xn);
            matvec_into(lw.wq.data(), hq * d, dm, &xn, &mut q);
            matvec_into(lw.wk.data(), cfg.kv_heads * d, dm, &xn, &mut k);
            matvec_into(lw.wv.data(), cfg.kv_heads * d, dm, &xn, &mut v);
            for h in 0..cfg.kv_heads {
                rope.rotate_in_place(&mut k[h * d..(h + 1) * d], pos);
                provider.push_kv(l, h, &k[h * d..(h + 1) * d], &v[h * d..(h + 1) * d]);
            }
            for qh in 0..hq {
                let qs = &mut q[qh * d..(qh + 1) * d];
                rope.rotate_in_place(qs, pos);
                provider.attend(l, qh, cfg.kv_head_of(qh), qs, &mut heads[qh * d..(qh + 1) * d]);
            }
            matvec_into(lw.wo.data(), dm, dm, &heads, &mut proj);
            axpy(&mut x, 1.0, &proj);

            rms_norm(&x, &lw.ffn_norm, &mut xn);
            matvec_into(lw.w_up.data(), cfg.ffn_dim, dm, &xn, &mut up);
            for u in up.iter_mut() {
                *u = silu(*u);
            }
            matvec_into(lw.w_down.data(), dm, cfg.ffn_dim, &up, &mut proj);
            axpy(&mut x, 1.0, &proj);
        }

        let logits = want_logits.then(|| self.logits_from_hidden(&x));
        Ok((x, logits))
    }

    pub fn logits_from_hidden(&self, x: &[f64]) -> Vector {
        let cfg = self.config();
        let mut xn = vec![0.0; cfg.d_model];
        rms_norm(x, &self.final_norm, &mut xn);
        let mut logits = vec![0.0; cfg.vocab];
        matvec_into(self.unembed.data(), cfg.vocab, cfg.d_model, &xn, &mut logits);
        Vector(logits)
    }

    /// Causal forward pass over `tokens` at positions `1..=n`, returning the
    /// populated cache.
    pub fn prefill(&self, tokens: &[u32]) -> Result<Prefill> {
        if tokens.is_empty() {
            return Err(Error::Empty("prefill"));
        }
        for &t in tokens {
            self.check_token(t)?;
        }
        let cfg = self.config();
        let mut cache = KVCache::new(cfg);
        let mut hidden = Matrix::zeros(0, cfg.d_model);
        let mut last_logits = None;
        for (i, &t) in tokens.iter().enumerate() {
            let last = i + 1 == tokens.len();
            let mut provider = FullCacheAttention::new(&mut cache);
            let (x, logits) = self.forward_token(t, i + 1, &mut provider, last)?;
            hidden.push_row(&x)?;
            last_logits = logits;
        }
        Ok(Prefill {
            cache,
            hidden,
            last_logits: last_logits.expect("non-empty context"),
        })
    }

    /// One autoregressive step with exact attention over `cache`, which is
    /// extended by the new token's keys and values.
    pub fn decode_step_full(&self, cache: &mut KVCache, token: u32, pos: usize) -> Result<Vector> {
        let mut provider = FullCacheAttention::new(cache);
        let (_, logits) = self.forward_token(token, pos, &mut provider, true)?;
        Ok(logits.expect("logits requested"))
    }

    /// Teacher-forced next-token logits for `tokens` appended after the
    /// cached context; the context cache itself is left untouched.
    pub fn continue_full(&self, context: &KVCache, tokens: &[u32]) -> Result<Vec<Vector>> {
        let mut cache = context.clone();
        let start = cache.last_position().unwrap_or(0);
        tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| self.decode_step_full(&mut cache, t, start + 1 + i))
            .collect()
    }

    /// Logits at every position of a single causal pass over `tokens`.
    pub fn forward_all(&self, tokens: &[u32]) -> Result<Vec<Vector>> {
        let mut cache = KVCache::new(self.config());
        tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| self.decode_step_full(&mut cache, t, i + 1))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::{argmax, softmax, Prng};

    fn tiny() -> ModelWeights {
        ModelWeights::init(&ModelConfig {
            layers: 2,
            kv_heads: 2,
            group_size: 2,
            head_dim: 8,
            d_model: 32,
            vocab: 40,
            ffn_dim: 48,
            seed: 5,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn attend_full_single_row_and_constant_values() {
        let mut rng = Prng::new(1);
        let q = Vector::random_normal(3, 1.0, &mut rng);
        let k1 = Matrix::random_normal(1, 3, 1.0, &mut rng);
        let v1 = Matrix::from_rows(&[vec![4.0, -2.0, 0.5]]).unwrap();
        assert_eq!(attend_full(&q, &k1, &v1).unwrap().0, v1.row(0).to_vec());

        let k = Matrix::random_normal(5, 3, 2.0, &mut rng);
        let row = vec![1.5, -0.25, 3.0];
        let v = Matrix::from_rows(&vec![row.clone(); 5]).unwrap();
        let out = attend_full(&q, &k, &v).unwrap();
        for (a, b) in out.iter().zip(&row) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(matches!(
            attend_full(&q, &Matrix::zeros(0, 3), &Matrix::zeros(0, 3)),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn attend_full_matches_brute_force() {
        let mut rng = Prng::new(2);
        let q = Vector::random_normal(3, 1.0, &mut rng);
        let k = Matrix::random_normal(4, 3, 1.0, &mut rng);
        let v = Matrix::random_normal(4, 3, 1.0, &mut rng);
        // Direct exponentials, no max shift.
        let e: Vec<f64> = (0..4)
            .map(|j| ((0..3).map(|c| q[c] * k.get(j, c)).sum::<f64>() / 3f64.sqrt()).exp())
            .collect();
        let z: f64 = e.iter().sum();
        let brute: Vec<f64> = (0..3)
            .map(|c| (0..4).map(|j| e[j] / z * v.get(j, c)).sum())
            .collect();
        let out = attend_full(&q, &k, &v).unwrap();
        for (a, b) in out.iter().zip(&brute) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn prefill_single_token_key_matches_projection() {
        let w = tiny();
        let pre = w.prefill(&[7]).unwrap();
        assert_eq!(pre.cache.len(), 1);
        assert_eq!(pre.cache.positions(), &[1]);
        // Layer-0 input is the embedding row.
        let cfg = w.config();
        let mut xn = vec![0.0; cfg.d_model];
        rms_norm(w.embed.row(7), &w.layers[0].attn_norm, &mut xn);
        for h in 0..cfg.kv_heads {
            let d = cfg.head_dim;
            let wk = Matrix::from_vec(d, cfg.d_model, w.layers[0].wk.data()[h * d * cfg.d_model..(h + 1) * d * cfg.d_model].to_vec()).unwrap();
            let raw = crate::tensor::matvec(&wk, &xn).unwrap();
            let rotated = crate::model::rope_rotate(&raw, 1, cfg.rope_base).unwrap();
            assert_eq!(pre.cache.keys(0, h).row(0), &rotated[..]);
        }
        assert_eq!(
            pre.cache.entry_count(),
            2 * cfg.layers * cfg.kv_heads * cfg.head_dim
        );
    }

    #[test]
    fn prefill_is_deterministic_and_rejects_bad_tokens() {
        let w = tiny();
        let toks = [1, 5, 9, 3, 3, 0];
        let a = w.prefill(&toks).unwrap();
        let b = w.prefill(&toks).unwrap();
        assert_eq!(a.cache, b.cache);
        assert_eq!(a.cache.entry_count(), 2 * 6 * 2 * 2 * 8);
        assert!(matches!(w.prefill(&[1, 40]), Err(Error::OutOfVocab { token: 40, .. })));
        assert!(matches!(w.prefill(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn incremental_decode_equals_batch_forward() {
        let w = tiny();
        let ctx = [3u32, 14, 15, 9, 2, 6];
        let tail = [5u32, 3, 5, 8, 9];
        let pre = w.prefill(&ctx).unwrap();
        let incremental = w.continue_full(&pre.cache, &tail).unwrap();
        let all: Vec<u32> = ctx.iter().chain(&tail).copied().collect();
        let batch = w.forward_all(&all).unwrap();
        assert_eq!(pre.last_logits, batch[ctx.len() - 1]);
        for (i, logits) in incremental.iter().enumerate() {
            assert_eq!(logits, &batch[ctx.len() + i]);
            assert_eq!(logits.dim(), 40);
        }
    }

    #[test]
    fn position_regression_is_an_error() {
        let w = tiny();
        let mut cache = w.prefill(&[1, 2, 3]).unwrap().cache;
        assert!(matches!(
            w.decode_step_full(&mut cache, 4, 3),
            Err(Error::PositionRegression { last: 3, got: 3 })
        ));
        w.decode_step_full(&mut cache, 4, 4).unwrap();
    }

    #[test]
    fn causality_future_tokens_do_not_change_past_logits() {
        let w = tiny();
        let a = w.forward_all(&[4, 8, 15, 16, 23, 2]).unwrap();
        let b = w.forward_all(&[4, 8, 15, 16, 30, 31]).unwrap();
        for t in 0..4 {
            assert_eq!(a[t], b[t]);
        }
        assert_ne!(a[4], b[4]);
    }

    #[test]
    fn greedy_decode_is_deterministic() {
        let w = tiny();
        let run = || {
            let mut cache = w.prefill(&[1, 2, 3, 4]).unwrap().cache;
            let mut tok = 5u32;
            let mut out = Vec::new();
            for pos in 5..15 {
                let logits = w.decode_step_full(&mut cache, tok, pos).unwrap();
                tok = argmax(&logits) as u32;
                out.push(tok);
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gqa_heads_in_a_group_read_the_same_cache() {
        struct Recorder(Vec<(usize, usize)>);
        impl AttentionProvider for Recorder {
            fn begin(&mut self, _: usize) -> Result<()> {
                Ok(())
            }
            fn push_kv(&mut self, _: usize, _: usize, _: &[f64], _: &[f64]) {}
            fn attend(&mut self, _: usize, qh: usize, kvh: usize, _: &[f64], out: &mut [f64]) {
                self.0.push((qh, kvh));
                out.fill(0.0);
            }
        }
        let w = tiny();
        let mut rec = Recorder(Vec::new());
        w.forward_token(1, 1, &mut rec, false).unwrap();
        assert_eq!(&rec.0[..4], &[(0, 0), (1, 0), (2, 1), (3, 1)]);
    }

    #[test]
    fn attention_rows_are_normalized() {
        let mut rng = Prng::new(4);
        let q = Vector::random_normal(8, 3.0, &mut rng);
        let k = Matrix::random_normal(100, 8, 3.0, &mut rng);
        let logits: Vec<f64> = (0..100).map(|j| dot(&q, k.row(j)) / 8f64.sqrt()).collect();
        let p = softmax(&logits);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
