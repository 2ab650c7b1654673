//! Frozen decoder-only transformer with rotary positions and grouped-query
//! attention. It plays the role of the base model whose long-context
//! attention the surrogates replace.

mod cache;
mod forward;
mod rope;

pub use cache::KVCache;
pub(crate) use forward::rms_norm;
pub use forward::{attend_full, attend_rows, AttentionProvider, FullCacheAttention, Prefill};
pub use rope::{rope_rotate, Rope};

use serde::{Deserialize, Serialize};

use crate::codec::{content_hash, Reader, Writer};
use crate::error::{Error, FileKind, Result};
use crate::tensor::{Matrix, Prng};

pub(crate) const RMS_EPS: f64 = 1e-6;

/// Shape and initialization parameters of the base model.
///
/// Query heads number `kv_heads · group_size`; query head `h'` reads KV head
/// `h' / group_size`. The model width is tied to the head layout
/// (`d_model = kv_heads · group_size · head_dim`) so the concatenated head
/// outputs feed the output projection directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub kv_heads: usize,
    pub group_size: usize,
    pub head_dim: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub ffn_dim: usize,
    pub rope_base: f64,
    /// Standard deviation of query/key projection entries, in units of
    /// `1/√d_model`. Attention logits then have standard deviation close to
    /// `qk_gain²`, so values above 1 give peaked attention patterns.
    pub qk_gain: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            kv_heads: 2,
            group_size: 2,
            head_dim: 16,
            d_model: 64,
            vocab: 256,
            ffn_dim: 128,
            rope_base: 10_000.0,
            qk_gain: 1.4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn query_heads(&self) -> usize {
        self.kv_heads * self.group_size
    }

    pub fn kv_head_of(&self, query_head: usize) -> usize {
        query_head / self.group_size
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("kv_heads", self.kv_heads),
            ("group_size", self.group_size),
            ("head_dim", self.head_dim),
            ("d_model", self.d_model),
            ("vocab", self.vocab),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "head_dim must be even, got {}",
                self.head_dim
            )));
        }
        let width = self.kv_heads * self.group_size * self.head_dim;
        if self.d_model != width {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must equal kv_heads·group_size·head_dim = {width}",
                self.d_model
            )));
        }
        if self.vocab > u32::MAX as usize {
            return Err(Error::InvalidConfig("vocabulary too large".into()));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return Err(Error::InvalidConfig(format!(
                "rope_base must be finite and > 1, got {}",
                self.rope_base
            )));
        }
        if !(self.qk_gain.is_finite() && self.qk_gain > 0.0) {
            return Err(Error::InvalidConfig("qk_gain must be positive".into()));
        }
        Ok(())
    }

    fn encode(&self, w: &mut Writer) {
        for v in [
            self.layers,
            self.kv_heads,
            self.group_size,
            self.head_dim,
            self.d_model,
            self.vocab,
            self.ffn_dim,
        ] {
            w.u32(v as u32);
        }
        w.f64(self.rope_base);
        w.f64(self.qk_gain);
        w.u64(self.seed);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let mut next = || r.u32_count();
        let layers = next()?;
        let kv_heads = next()?;
        let group_size = next()?;
        let head_dim = next()?;
        let d_model = next()?;
        let vocab = next()?;
        let ffn_dim = next()?;
        let cfg = Self {
            layers,
            kv_heads,
            group_size,
            head_dim,
            d_model,
            vocab,
            ffn_dim,
            rope_base: r.f64()?,
            qk_gain: r.f64()?,
            seed: r.u64()?,
        };
        cfg.validate().map_err(|e| r.malformed(e.to_string()))?;
        Ok(cfg)
    }

    pub fn config_hash(&self) -> u64 {
        let mut w = Writer::new();
        self.encode(&mut w);
        content_hash(&[b"model-config", &w.finish()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    /// All query heads stacked: rows `[h'·d, (h'+1)·d)` hold `W_Q^{h'}`.
    pub wq: Matrix,
    /// All KV heads stacked, `kv_heads·d × d_model`.
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f64>,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    cfg: ModelConfig,
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    pub unembed: Matrix,
    rope: RopeHandle,
}

// Rope tables are derived from the config; comparing weights ignores them.
#[derive(Debug, Clone)]
struct RopeHandle(Rope);

impl PartialEq for RopeHandle {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

const MODEL_MAGIC: &[u8; 8] = b"KVSMODL\0";
const MODEL_VERSION: u32 = 1;

impl ModelWeights {
    /// Seeded initialization.
    ///
    /// Embeddings are N(0, 1). Query and key projections are
    /// N(0, qk_gain²/d_model); value, output, and feed-forward projections are
    /// N(0, 1/fan_in). The unembedding is N(0, 1/d_model). Norm gains are 1.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let root = Prng::new(cfg.seed);
        let dm = cfg.d_model;
        let d = cfg.head_dim;
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let mut rng = root.split(0);
        let embed = Matrix::random_normal(cfg.vocab, dm, 1.0, &mut rng);
        let qk_std = cfg.qk_gain / (dm as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|l| {
                let mut rng = root.split(1 + l as u64);
                LayerWeights {
                    attn_norm: vec![1.0; dm],
                    wq: Matrix::random_normal(cfg.query_heads() * d, dm, qk_std, &mut rng),
                    wk: Matrix::random_normal(cfg.kv_heads * d, dm, qk_std, &mut rng),
                    wv: Matrix::random_normal(cfg.kv_heads * d, dm, fan(dm), &mut rng),
                    wo: Matrix::random_normal(dm, dm, fan(dm), &mut rng),
                    ffn_norm: vec![1.0; dm],
                    w_up: Matrix::random_normal(cfg.ffn_dim, dm, fan(dm), &mut rng),
                    w_down: Matrix::random_normal(dm, cfg.ffn_dim, fan(cfg.ffn_dim), &mut rng),
                }
            })
            .collect();
        let mut rng = root.split(1 + cfg.layers as u64);
        let unembed = Matrix::random_normal(cfg.vocab, dm, fan(dm), &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            layers,
            final_norm: vec![1.0; dm],
            unembed,
            rope: RopeHandle(Rope::new(d, cfg.rope_base)?),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn rope(&self) -> &Rope {
        &self.rope.0
    }

    pub fn check_token(&self, token: u32) -> Result<()> {
        if (token as usize) < self.cfg.vocab {
            Ok(())
        } else {
            Err(Error::OutOfVocab {
                token,
                vocab: self.cfg.vocab,
            })
        }
    }

    /// Total number of stored weight entries.
    pub fn parameter_count(&self) -> usize {
        let mut n = self.embed.data().len() + self.unembed.data().len() + self.final_norm.len();
        for l in &self.layers {
            n += l.attn_norm.len()
                + l.wq.data().len()
                + l.wk.data().len()
                + l.wv.data().len()
                + l.wo.data().len()
                + l.ffn_norm.len()
                + l.w_up.data().len()
                + l.w_down.data().len();
        }
        n
    }

    /// Checkpoint layout (little-endian):
    ///
    /// ```text
    /// magic    8 bytes  "KVSMODL\0"
    /// version  u32      1
    /// config   7 × u32 (layers, kv_heads, group_size, head_dim, d_model,
    ///          vocab, ffn_dim), f64 rope_base, f64 qk_gain, u64 seed
    /// tensors  f64 arrays, row-major, in declaration order:
    ///          embed; per layer attn_norm, wq, wk, wv, wo, ffn_norm, w_up,
    ///          w_down; final_norm; unembed
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        self.cfg.encode(&mut w);
        w.f64s(self.embed.data());
        for l in &self.layers {
            w.f64s(&l.attn_norm);
            w.f64s(l.wq.data());
            w.f64s(l.wk.data());
            w.f64s(l.wv.data());
            w.f64s(l.wo.data());
            w.f64s(&l.ffn_norm);
            w.f64s(l.w_up.data());
            w.f64s(l.w_down.data());
        }
        w.f64s(&self.final_norm);
        w.f64s(self.unembed.data());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(FileKind::ModelCheckpoint, bytes);
        r.magic(MODEL_MAGIC)?;
        r.version(MODEL_VERSION)?;
        let cfg = ModelConfig::decode(&mut r)?;
        let dm = cfg.d_model;
        let d = cfg.head_dim;
        let mat = |r: &mut Reader<'_>, rows: usize, cols: usize| -> Result<Matrix> {
            let len = crate::codec::checked_len(FileKind::ModelCheckpoint, &[rows, cols])?;
            Matrix::from_vec(rows, cols, r.f64s(len)?)
        };
        let embed = mat(&mut r, cfg.vocab, dm)?;
        let mut layers = Vec::new();
        for _ in 0..cfg.layers {
            layers.push(LayerWeights {
                attn_norm: r.f64s(dm)?,
                wq: mat(&mut r, cfg.query_heads() * d, dm)?,
                wk: mat(&mut r, cfg.kv_heads * d, dm)?,
                wv: mat(&mut r, cfg.kv_heads * d, dm)?,
                wo: mat(&mut r, dm, dm)?,
                ffn_norm: r.f64s(dm)?,
                w_up: mat(&mut r, cfg.ffn_dim, dm)?,
                w_down: mat(&mut r, dm, cfg.ffn_dim)?,
            });
        }
        let final_norm = r.f64s(dm)?;
        let unembed = mat(&mut r, cfg.vocab, dm)?;
        r.expect_end()?;
        let rope = RopeHandle(Rope::new(d, cfg.rope_base)?);
        Ok(Self {
            cfg,
            embed,
            layers,
            final_norm,
            unembed,
            rope,
        })
    }

    /// Content hash over config and every weight; keys downstream artifacts.
    pub fn weights_hash(&self) -> u64 {
        content_hash(&[b"model-weights", &self.to_bytes()])
    }
}
