use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::ModelConfig;

/// Rotated keys and values per (layer, KV head), one row per cached token.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    layers: usize,
    kv_heads: usize,
    head_dim: usize,
    positions: Vec<usize>,
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
}

impl KVCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self::with_shape(cfg.layers, cfg.kv_heads, cfg.head_dim)
    }

    pub fn with_shape(layers: usize, kv_heads: usize, head_dim: usize) -> Self {
        let slots = layers * kv_heads;
        Self {
            layers,
            kv_heads,
            head_dim,
            positions: Vec::new(),
            keys: (0..slots).map(|_| Matrix::zeros(0, head_dim)).collect(),
            values: (0..slots).map(|_| Matrix::zeros(0, head_dim)).collect(),
        }
    }

    /// Builds a cache from explicit per-(layer, head) matrices, indexed
    /// `layer * kv_heads + head`. All matrices must share `positions.len()`
    /// rows and a common head dimension.
    pub fn from_parts(
        layers: usize,
        kv_heads: usize,
        positions: Vec<usize>,
        keys: Vec<Matrix>,
        values: Vec<Matrix>,
    ) -> Result<Self> {
        let slots = layers * kv_heads;
        if keys.len() != slots || values.len() != slots || slots == 0 {
            return Err(Error::InvalidArgument(format!(
                "expected {slots} key and value matrices"
            )));
        }
        let head_dim = keys[0].cols();
        for m in keys.iter().chain(values.iter()) {
            if m.rows() != positions.len() || m.cols() != head_dim {
                return Err(Error::InvalidArgument(
                    "cache matrices disagree on shape".into(),
                ));
            }
        }
        if positions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "cache positions must increase".into(),
            ));
        }
        Ok(Self {
            layers,
            kv_heads,
            head_dim,
            positions,
            keys,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn last_position(&self) -> Option<usize> {
        self.positions.last().copied()
    }

    pub fn keys(&self, layer: usize, kv_head: usize) -> &Matrix {
        &self.keys[layer * self.kv_heads + kv_head]
    }

    pub fn values(&self, layer: usize, kv_head: usize) -> &Matrix {
        &self.values[layer * self.kv_heads + kv_head]
    }

    /// Number of stored floats, `2 · n · L · H_kv · d`.
    pub fn entry_count(&self) -> usize {
        2 * self.len() * self.layers * self.kv_heads * self.head_dim
    }

    pub(crate) fn begin_position(&mut self, pos: usize) -> Result<()> {
        if let Some(last) = self.last_position() {
            if pos <= last {
                return Err(Error::PositionRegression { last, got: pos });
            }
        }
        self.positions.push(pos);
        Ok(())
    }

    pub(crate) fn push(&mut self, layer: usize, kv_head: usize, k: &[f64], v: &[f64]) {
        let i = layer * self.kv_heads + kv_head;
        self.keys[i]
            .push_row(k)
            .expect("key width fixed by construction");
        self.values[i]
            .push_row(v)
            .expect("value width fixed by construction");
    }
}
