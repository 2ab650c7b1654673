//! Ground-truth long-context attention intermediates.
//!
//! For a query `q` and the context cache `(K, V)` of one (layer, KV head):
//! the score is `log Σ_j exp(⟨q, k_j⟩/√d)` and the target is the
//! softmax-weighted average of the value rows. Both are cached per
//! post-context query position, layer, and query head, together with the
//! full model's next-token logits, and persisted in a target cache file.

use crate::codec::{checked_len, content_hash, tokens_bytes, Reader, Writer};
use crate::error::{check_dim, Error, FileKind, Result};
use crate::model::{attend_rows, AttentionProvider, FullCacheAttention, KVCache, ModelWeights};
use crate::tensor::{axpy, dot, log_sum_exp_unchecked, softmax_in_place, Matrix, Prng, Vector};

/// `log Σ_j exp(⟨q, k_j⟩/√d)` over all rows of `k`.
pub fn score_alpha(q: &[f64], k: &Matrix) -> Result<f64> {
    if k.rows() == 0 {
        return Err(Error::Empty("score_alpha"));
    }
    check_dim("score_alpha", k.cols(), q.len())?;
    let mut scratch = Vec::with_capacity(k.rows());
    Ok(alpha_rows(q, k, k.rows(), &mut scratch))
}

/// Softmax attention of `q` over `(k, v)`.
pub fn target_a(q: &[f64], k: &Matrix, v: &Matrix) -> Result<Vector> {
    crate::model::attend_full(q, k, v)
}

pub(crate) fn alpha_rows(q: &[f64], k: &Matrix, rows: usize, scratch: &mut Vec<f64>) -> f64 {
    let scale = 1.0 / (q.len() as f64).sqrt();
    scratch.clear();
    scratch.extend((0..rows).map(|j| scale * dot(q, k.row(j))));
    log_sum_exp_unchecked(scratch)
}

/// Score and target over the first `rows` rows in one logit pass.
pub(crate) fn alpha_and_target_rows(
    q: &[f64],
    k: &Matrix,
    v: &Matrix,
    rows: usize,
    scratch: &mut Vec<f64>,
    target: &mut [f64],
) -> f64 {
    let alpha = alpha_rows(q, k, rows, scratch);
    softmax_in_place(scratch);
    target.fill(0.0);
    for (j, &w) in scratch.iter().enumerate() {
        axpy(target, w, v.row(j));
    }
    alpha
}

/// One post-context token sequence to be run under teacher forcing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySample {
    pub id: u32,
    pub tokens: Vec<u32>,
}

/// Shape and provenance of a target cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetHeader {
    /// Hash of (model weights, context tokens); see [`context_key`].
    pub key_hash: u64,
    pub n: usize,
    pub layers: usize,
    pub kv_heads: usize,
    pub group_size: usize,
    pub head_dim: usize,
    pub vocab: usize,
}

impl TargetHeader {
    pub fn query_heads(&self) -> usize {
        self.kv_heads * self.group_size
    }

    fn records_per_position(&self) -> usize {
        self.layers * self.query_heads()
    }
}

/// Cached targets of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTargets {
    pub id: u32,
    pub tokens: Vec<u32>,
    /// Rotated queries, `(position, layer, query head) × d`.
    queries: Vec<f64>,
    alphas: Vec<f64>,
    targets: Vec<f64>,
    /// Full-attention next-token logits, `position × vocab`.
    teacher_logits: Vec<f64>,
}

impl SampleTargets {
    /// Assembles a sample from raw arrays laid out as in the cache file:
    /// `records = alphas.len()` must be a multiple of the token count, and
    /// queries and targets must hold `records × d` values each.
    pub fn from_parts(
        id: u32,
        tokens: Vec<u32>,
        queries: Vec<f64>,
        alphas: Vec<f64>,
        targets: Vec<f64>,
        teacher_logits: Vec<f64>,
    ) -> Result<Self> {
        let records = alphas.len();
        let ok = !tokens.is_empty()
            && records.is_multiple_of(tokens.len())
            && records > 0
            && queries.len().is_multiple_of(records)
            && targets.len() == queries.len()
            && teacher_logits.len().is_multiple_of(tokens.len());
        if !ok {
            return Err(Error::InvalidArgument("inconsistent sample target arrays".into()));
        }
        Ok(Self {
            id,
            tokens,
            queries,
            alphas,
            targets,
            teacher_logits,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Borrowed view of one cached (position, layer, query head) record.
#[derive(Debug, Clone, Copy)]
pub struct TargetRecord<'a> {
    pub q: &'a [f64],
    pub alpha: f64,
    pub target: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetCache {
    pub header: TargetHeader,
    pub samples: Vec<SampleTargets>,
}

/// Key binding a target cache to the model and context that produced it.
pub fn context_key(weights: &ModelWeights, context: &[u32]) -> u64 {
    content_hash(&[
        b"context-key",
        &weights.weights_hash().to_le_bytes(),
        &tokens_bytes(context),
    ])
}

const TARGET_MAGIC: &[u8; 8] = b"KVSTGT\0\0";
const TARGET_VERSION: u32 = 1;

impl TargetCache {
    pub fn record(&self, sample: usize, pos: usize, layer: usize, query_head: usize) -> TargetRecord<'_> {
        let h = &self.header;
        let d = h.head_dim;
        let s = &self.samples[sample];
        let idx = (pos * h.layers + layer) * h.query_heads() + query_head;
        TargetRecord {
            q: &s.queries[idx * d..(idx + 1) * d],
            alpha: s.alphas[idx],
            target: &s.targets[idx * d..(idx + 1) * d],
        }
    }

    pub fn teacher_logits(&self, sample: usize, pos: usize) -> &[f64] {
        let v = self.header.vocab;
        &self.samples[sample].teacher_logits[pos * v..(pos + 1) * v]
    }

    /// Total positions over all samples.
    pub fn position_count(&self) -> usize {
        self.samples.iter().map(SampleTargets::len).sum()
    }

    /// Total (position, layer, query head) records.
    pub fn record_count(&self) -> usize {
        self.position_count() * self.header.records_per_position()
    }

    /// Every (sample, position) pair in storage order.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        self.samples
            .iter()
            .enumerate()
            .flat_map(|(s, st)| (0..st.len()).map(move |p| (s, p)))
            .collect()
    }

    pub fn check_key(&self, expected: u64) -> Result<()> {
        if self.header.key_hash != expected {
            return Err(Error::HashMismatch {
                kind: FileKind::TargetCache,
                expected,
                found: self.header.key_hash,
            });
        }
        Ok(())
    }

    /// File layout (little-endian):
    ///
    /// ```text
    /// magic      8 bytes "KVSTGT\0\0"
    /// version    u32     1
    /// key_hash   u64
    /// n          u64     context length
    /// layers, kv_heads, group_size, head_dim, vocab   5 × u32
    /// samples    u32     sample count S
    /// index      S × (id u32, query_len u32, offset u64)
    ///            offset = byte offset of the sample block from the start of
    ///            the record section
    /// records    per sample block:
    ///              tokens  query_len × u32
    ///              per (position, layer, query head) in that order:
    ///                q f64×d, alpha f64, target f64×d
    ///              teacher logits query_len × vocab × f64
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut w = Writer::new();
        w.bytes(TARGET_MAGIC);
        w.u32(TARGET_VERSION);
        w.u64(h.key_hash);
        w.u64(h.n as u64);
        for v in [h.layers, h.kv_heads, h.group_size, h.head_dim, h.vocab] {
            w.u32(v as u32);
        }
        w.u32(self.samples.len() as u32);
        let mut offset = 0u64;
        for s in &self.samples {
            w.u32(s.id);
            w.u32(s.len() as u32);
            w.u64(offset);
            offset += self.block_bytes(s.len()) as u64;
        }
        let d = h.head_dim;
        for s in &self.samples {
            w.u32s(&s.tokens);
            for idx in 0..s.alphas.len() {
                w.f64s(&s.queries[idx * d..(idx + 1) * d]);
                w.f64(s.alphas[idx]);
                w.f64s(&s.targets[idx * d..(idx + 1) * d]);
            }
            w.f64s(&s.teacher_logits);
        }
        w.finish()
    }

    fn block_bytes(&self, len: usize) -> usize {
        let h = &self.header;
        len * 4 + len * h.records_per_position() * (2 * h.head_dim + 1) * 8 + len * h.vocab * 8
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let kind = FileKind::TargetCache;
        let mut r = Reader::new(kind, bytes);
        r.magic(TARGET_MAGIC)?;
        r.version(TARGET_VERSION)?;
        let key_hash = r.u64()?;
        let n = r.count()?;
        let layers = r.u32_count()?;
        let kv_heads = r.u32_count()?;
        let group_size = r.u32_count()?;
        let head_dim = r.u32_count()?;
        let vocab = r.u32_count()?;
        if [n, layers, kv_heads, group_size, head_dim, vocab].contains(&0) {
            return Err(r.malformed("zero dimension in header"));
        }
        let header = TargetHeader {
            key_hash,
            n,
            layers,
            kv_heads,
            group_size,
            head_dim,
            vocab,
        };
        let per_pos = checked_len(kind, &[layers, kv_heads, group_size])?;
        let count = r.u32_count()?;
        // Each index entry is 16 bytes; reject counts the file cannot hold.
        if count > r.remaining() / 16 {
            return Err(r.malformed("sample count exceeds file size"));
        }
        let mut index = Vec::with_capacity(count);
        for _ in 0..count {
            index.push((r.u32()?, r.u32_count()?, r.u64()?));
        }
        let mut samples = Vec::with_capacity(count);
        let mut expected_offset = 0u64;
        let cache = TargetCache {
            header,
            samples: Vec::new(),
        };
        for (id, len, offset) in index {
            if offset != expected_offset {
                return Err(r.malformed(format!(
                    "sample {id} offset {offset} does not match layout ({expected_offset})"
                )));
            }
            let tokens = r.u32s(len)?;
            let records = checked_len(kind, &[len, per_pos])?;
            let mut queries = Vec::new();
            let mut alphas = Vec::new();
            let mut targets = Vec::new();
            for _ in 0..records {
                queries.extend(r.f64s(head_dim)?);
                alphas.push(r.f64()?);
                targets.extend(r.f64s(head_dim)?);
            }
            let teacher_logits = r.f64s(checked_len(kind, &[len, vocab])?)?;
            expected_offset += cache.block_bytes(len) as u64;
            samples.push(SampleTargets {
                id,
                tokens,
                queries,
                alphas,
                targets,
                teacher_logits,
            });
        }
        r.expect_end()?;
        Ok(Self { header, samples })
    }

    /// Loads a cache and refuses it unless it was built for `weights` and
    /// `context`.
    pub fn from_bytes_for(bytes: &[u8], weights: &ModelWeights, context: &[u32]) -> Result<Self> {
        let cache = Self::from_bytes(bytes)?;
        cache.check_key(context_key(weights, context))?;
        Ok(cache)
    }
}

/// Full attention that also records, for every query, the score and target
/// over the first `n` (context) rows.
struct CapturingAttention<'a> {
    inner: FullCacheAttention<'a>,
    n: usize,
    head_dim: usize,
    scratch: Vec<f64>,
    queries: Vec<f64>,
    alphas: Vec<f64>,
    targets: Vec<f64>,
}

impl AttentionProvider for CapturingAttention<'_> {
    fn begin(&mut self, pos: usize) -> Result<()> {
        self.inner.begin(pos)
    }

    fn push_kv(&mut self, layer: usize, kv_head: usize, k: &[f64], v: &[f64]) {
        self.inner.push_kv(layer, kv_head, k, v);
    }

    fn attend(&mut self, layer: usize, qh: usize, kv_head: usize, q: &[f64], out: &mut [f64]) {
        let keys = self.inner.cache.keys(layer, kv_head);
        let values = self.inner.cache.values(layer, kv_head);
        let mut target = vec![0.0; self.head_dim];
        let alpha = alpha_and_target_rows(q, keys, values, self.n, &mut self.scratch, &mut target);
        self.queries.extend_from_slice(q);
        self.alphas.push(alpha);
        self.targets.extend_from_slice(&target);
        self.inner.attend(layer, qh, kv_head, q, out);
    }
}

/// Teacher-forced targets for one sample continuing after `context`.
pub fn sample_targets(weights: &ModelWeights, context: &KVCache, sample: &QuerySample) -> Result<SampleTargets> {
    let cfg = weights.config();
    let n = context.len();
    if n == 0 {
        return Err(Error::Empty("context cache"));
    }
    let mut cache = context.clone();
    let start = context.last_position().unwrap_or(0);
    let mut provider = CapturingAttention {
        inner: FullCacheAttention::new(&mut cache),
        n,
        head_dim: cfg.head_dim,
        scratch: Vec::new(),
        queries: Vec::new(),
        alphas: Vec::new(),
        targets: Vec::new(),
    };
    let mut teacher_logits = Vec::with_capacity(sample.tokens.len() * cfg.vocab);
    for (i, &t) in sample.tokens.iter().enumerate() {
        let (_, logits) = weights.forward_token(t, start + 1 + i, &mut provider, true)?;
        teacher_logits.extend_from_slice(&logits.expect("requested"));
    }
    Ok(SampleTargets {
        id: sample.id,
        tokens: sample.tokens.clone(),
        queries: provider.queries,
        alphas: provider.alphas,
        targets: provider.targets,
        teacher_logits,
    })
}

/// Runs every sample after the shared context and collects its targets.
///
/// `context_cache` must be the prefill of `context`; `expected_model_hash`
/// (when given) must match the weights, guarding against pairing a cache
/// request with the wrong model.
pub fn cache_targets(
    weights: &ModelWeights,
    context: &[u32],
    context_cache: &KVCache,
    samples: &[QuerySample],
    expected_model_hash: Option<u64>,
) -> Result<TargetCache> {
    if let Some(expected) = expected_model_hash {
        let found = weights.weights_hash();
        if found != expected {
            return Err(Error::HashMismatch {
                kind: FileKind::TargetCache,
                expected,
                found,
            });
        }
    }
    if context_cache.len() != context.len() {
        return Err(Error::InvalidArgument(format!(
            "context cache holds {} tokens but context has {}",
            context_cache.len(),
            context.len()
        )));
    }
    let cfg = weights.config();
    let header = TargetHeader {
        key_hash: context_key(weights, context),
        n: context.len(),
        layers: cfg.layers,
        kv_heads: cfg.kv_heads,
        group_size: cfg.group_size,
        head_dim: cfg.head_dim,
        vocab: cfg.vocab,
    };
    let samples = samples
        .iter()
        .map(|s| sample_targets(weights, context_cache, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(TargetCache { header, samples })
}

/// Outcome of re-deriving cached records from scratch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyReport {
    pub checked: usize,
    pub max_abs_deviation: f64,
}

/// Recomputes `count` random (sample, position) slices from a fresh prefill
/// of `context` and reports the largest deviation over queries, scores,
/// targets and teacher logits.
pub fn verify_targets(
    weights: &ModelWeights,
    context: &[u32],
    cache: &TargetCache,
    count: usize,
    seed: u64,
) -> Result<VerifyReport> {
    cache.check_key(context_key(weights, context))?;
    let prefill = weights.prefill(context)?;
    let h = cache.header;
    let d = h.head_dim;
    let mut rng = Prng::new(seed);
    let positions = cache.positions();
    let mut max_dev: f64 = 0.0;
    let mut checked = 0;
    let mut scratch = Vec::new();
    for _ in 0..count.min(positions.len()) {
        let (s, p) = positions[rng.below(positions.len())];
        let sample = &cache.samples[s];
        // Teacher forcing up to and including position p.
        let mut kv = prefill.cache.clone();
        let start = kv.last_position().unwrap_or(0);
        let mut logits = None;
        let mut provider = Recorder {
            inner: FullCacheAttention::new(&mut kv),
            queries: Vec::new(),
        };
        for (i, &t) in sample.tokens[..=p].iter().enumerate() {
            provider.queries.clear();
            logits = weights.forward_token(t, start + 1 + i, &mut provider, true)?.1;
        }
        let logits = logits.expect("at least one token");
        let queries = std::mem::take(&mut provider.queries);
        for (slot, q) in queries.chunks_exact(d).enumerate() {
            let layer = slot / h.query_heads();
            let qh = slot % h.query_heads();
            let kvh = qh / h.group_size;
            let keys = prefill.cache.keys(layer, kvh);
            let values = prefill.cache.values(layer, kvh);
            let alpha = score_alpha(q, keys)?;
            let mut target = vec![0.0; d];
            attend_rows(q, keys, values, keys.rows(), &mut scratch, &mut target);
            let rec = cache.record(s, p, layer, qh);
            max_dev = max_dev.max((rec.alpha - alpha).abs());
            for ((a, b), (c, e)) in rec.q.iter().zip(q).zip(rec.target.iter().zip(&target)) {
                max_dev = max_dev.max((a - b).abs()).max((c - e).abs());
            }
            checked += 1;
        }
        for (a, b) in cache.teacher_logits(s, p).iter().zip(logits.iter()) {
            max_dev = max_dev.max((a - b).abs());
        }
    }
    Ok(VerifyReport {
        checked,
        max_abs_deviation: max_dev,
    })
}

struct Recorder<'a> {
    inner: FullCacheAttention<'a>,
    queries: Vec<f64>,
}

impl AttentionProvider for Recorder<'_> {
    fn begin(&mut self, pos: usize) -> Result<()> {
        self.inner.begin(pos)
    }

    fn push_kv(&mut self, layer: usize, kv_head: usize, k: &[f64], v: &[f64]) {
        self.inner.push_kv(layer, kv_head, k, v);
    }

    fn attend(&mut self, layer: usize, qh: usize, kv_head: usize, q: &[f64], out: &mut [f64]) {
        self.queries.extend_from_slice(q);
        self.inner.attend(layer, qh, kv_head, q, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::{squared_norm, Vector};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            kv_heads: 2,
            group_size: 2,
            head_dim: 8,
            d_model: 32,
            vocab: 40,
            ffn_dim: 48,
            seed: 17,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn score_alpha_cases() {
        // ⟨q,k⟩/√d = 0.5 with d = 4: q·k = 1.
        let q = [0.5, 0.5, 0.0, 0.0];
        let k = Matrix::from_rows(&[vec![1.0, 1.0, 0.0, 0.0]]).unwrap();
        assert!((score_alpha(&q, &k).unwrap() - 0.5).abs() < 1e-15);
        let k5 = Matrix::from_rows(&vec![vec![1.0, 1.0, 0.0, 0.0]; 5]).unwrap();
        assert!((score_alpha(&q, &k5).unwrap() - (5f64.ln() + 0.5)).abs() < 1e-14);
        let mut rng = Prng::new(4);
        let q = Vector::random_normal(3, 1.0, &mut rng);
        let k = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let brute = (0..5)
            .map(|j| (dot(&q, k.row(j)) / 3f64.sqrt()).exp())
            .sum::<f64>()
            .ln();
        assert!((score_alpha(&q, &k).unwrap() - brute).abs() < 1e-14);
        assert!(matches!(score_alpha(&q, &Matrix::zeros(0, 3)), Err(Error::Empty(_))));
    }

    #[test]
    fn consistency_identity_holds() {
        let mut rng = Prng::new(8);
        for _ in 0..20 {
            let q = Vector::random_normal(6, 2.0, &mut rng);
            let k = Matrix::random_normal(30, 6, 1.5, &mut rng);
            let v = Matrix::random_normal(30, 6, 1.0, &mut rng);
            let alpha = score_alpha(&q, &k).unwrap();
            let a = target_a(&q, &k, &v).unwrap();
            let mut rhs = vec![0.0; 6];
            for j in 0..30 {
                axpy(&mut rhs, (dot(&q, k.row(j)) / 6f64.sqrt()).exp(), v.row(j));
            }
            let lhs: Vec<f64> = a.iter().map(|x| alpha.exp() * x).collect();
            let err = (squared_norm(&lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect::<Vec<_>>())
                / squared_norm(&rhs))
            .sqrt();
            assert!(err <= 1e-10, "relative error {err}");
        }
    }

    #[test]
    fn targets_lie_within_value_bounds() {
        let mut rng = Prng::new(12);
        let q = Vector::random_normal(4, 3.0, &mut rng);
        let k = Matrix::random_normal(12, 4, 1.0, &mut rng);
        let v = Matrix::random_normal(12, 4, 1.0, &mut rng);
        let a = target_a(&q, &k, &v).unwrap();
        for c in 0..4 {
            let lo = (0..12).map(|j| v.get(j, c)).fold(f64::INFINITY, f64::min);
            let hi = (0..12).map(|j| v.get(j, c)).fold(f64::NEG_INFINITY, f64::max);
            assert!(a[c] >= lo - 1e-12 && a[c] <= hi + 1e-12);
        }
    }

    fn small_cache() -> (ModelWeights, Vec<u32>, TargetCache) {
        let w = ModelWeights::init(&tiny_cfg()).unwrap();
        let ctx: Vec<u32> = (0..24).map(|i| (i * 7 % 40) as u32).collect();
        let pre = w.prefill(&ctx).unwrap();
        let samples = vec![
            QuerySample { id: 0, tokens: vec![3, 9, 1] },
            QuerySample { id: 1, tokens: vec![5, 5, 2, 8, 30] },
        ];
        let tc = cache_targets(&w, &ctx, &pre.cache, &samples, Some(w.weights_hash())).unwrap();
        (w, ctx, tc)
    }

    #[test]
    fn record_count_matches_shape_audit() {
        let (_, _, tc) = small_cache();
        assert_eq!(tc.record_count(), (3 + 5) * 2 * 2 * 2);
        assert_eq!(tc.samples[1].alphas.len(), 5 * 2 * 4);
    }

    #[test]
    fn caching_is_deterministic_and_round_trips() {
        let (w, ctx, tc) = small_cache();
        let (_, _, again) = small_cache();
        let bytes = tc.to_bytes();
        assert_eq!(bytes, again.to_bytes());
        let back = TargetCache::from_bytes_for(&bytes, &w, &ctx).unwrap();
        assert_eq!(back, tc);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn stored_records_match_recomputation() {
        let (w, ctx, tc) = small_cache();
        let report = verify_targets(&w, &ctx, &tc, 8, 3).unwrap();
        assert!(report.checked > 0);
        assert_eq!(report.max_abs_deviation, 0.0);
    }

    #[test]
    fn teacher_logits_match_full_decode() {
        let (w, ctx, tc) = small_cache();
        let pre = w.prefill(&ctx).unwrap();
        let full = w.continue_full(&pre.cache, &tc.samples[1].tokens).unwrap();
        for (p, logits) in full.iter().enumerate() {
            assert_eq!(tc.teacher_logits(1, p), &logits[..]);
        }
    }

    #[test]
    fn mismatched_model_or_context_is_refused() {
        let (w, ctx, tc) = small_cache();
        let other = ModelWeights::init(&ModelConfig { seed: 99, ..tiny_cfg() }).unwrap();
        let bytes = tc.to_bytes();
        assert!(matches!(
            TargetCache::from_bytes_for(&bytes, &other, &ctx),
            Err(Error::HashMismatch { kind: FileKind::TargetCache, .. })
        ));
        let pre = w.prefill(&ctx).unwrap();
        assert!(matches!(
            cache_targets(&w, &ctx, &pre.cache, &[], Some(other.weights_hash())),
            Err(Error::HashMismatch { .. })
        ));
    }

    #[test]
    fn low_temperature_gap_is_bounded() {
        let mut rng = Prng::new(21);
        let q = Vector::random_normal(4, 1.0, &mut rng);
        let k = Matrix::random_normal(10, 4, 1.0, &mut rng);
        let m = (0..10).map(|j| dot(&q, k.row(j)) / 2.0).fold(f64::NEG_INFINITY, f64::max);
        let mut prev = f64::INFINITY;
        for beta in [1.0, 10.0, 100.0] {
            let bq: Vec<f64> = q.iter().map(|x| beta * x).collect();
            let smooth = score_alpha(&bq, &k).unwrap() / beta;
            let gap = smooth - m;
            assert!(gap >= -1e-12 && gap <= 10f64.ln() / beta + 1e-12);
            assert!(smooth <= prev);
            prev = smooth;
        }
    }
}
