//! Quadrature surrogate: `p` learned key/value rows standing in for the
//! `n` context rows, evaluated with the same log-normalizer and softmax
//! average as exact attention.

use crate::error::{check_dim, Error, Result};
use crate::model::KVCache;
use crate::tensor::{axpy, dot, log_sum_exp_unchecked, outer_acc, softmax_in_place, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureModule {
    /// `[W (p×d) ; Z (p×d)]`, row-major.
    params: Vec<f64>,
    p: usize,
    d: usize,
}

/// Softmax weights from the last traced evaluation.
#[derive(Debug, Clone, Default)]
pub struct QuadratureTrace {
    q: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureModule {
    pub fn new(w: &Matrix, z: &Matrix) -> Result<Self> {
        if w.rows() == 0 {
            return Err(Error::InvalidConfig("quadrature module needs p ≥ 1".into()));
        }
        check_dim("QuadratureModule rows", w.rows(), z.rows())?;
        check_dim("QuadratureModule cols", w.cols(), z.cols())?;
        let mut params = Vec::with_capacity(2 * w.rows() * w.cols());
        params.extend_from_slice(w.data());
        params.extend_from_slice(z.data());
        Ok(Self {
            params,
            p: w.rows(),
            d: w.cols(),
        })
    }

    pub fn from_params(p: usize, d: usize, params: Vec<f64>) -> Result<Self> {
        if p == 0 || d == 0 {
            return Err(Error::InvalidConfig("quadrature module needs p, d ≥ 1".into()));
        }
        check_dim("QuadratureModule::from_params", 2 * p * d, params.len())?;
        Ok(Self { params, p, d })
    }

    /// `W` and `Z` from the first `p` cached keys and values of one head.
    pub fn from_cache(cache: &KVCache, layer: usize, kv_head: usize, p: usize) -> Result<Self> {
        if p == 0 || p > cache.len() {
            return Err(Error::InvalidArgument(format!(
                "quadrature size {p} outside 1..={}",
                cache.len()
            )));
        }
        Self::new(
            &cache.keys(layer, kv_head).head_rows(p)?,
            &cache.values(layer, kv_head).head_rows(p)?,
        )
    }

    pub fn points(&self) -> usize {
        self.p
    }

    pub fn head_dim(&self) -> usize {
        self.d
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn w_row(&self, j: usize) -> &[f64] {
        &self.params[j * self.d..(j + 1) * self.d]
    }

    pub fn z_row(&self, j: usize) -> &[f64] {
        let off = (self.p + j) * self.d;
        &self.params[off..off + self.d]
    }

    pub fn score(&self, q: &[f64]) -> f64 {
        self.forward(q).0
    }

    pub fn target(&self, q: &[f64]) -> Vec<f64> {
        self.forward(q).1
    }

    pub fn forward(&self, q: &[f64]) -> (f64, Vec<f64>) {
        let mut trace = QuadratureTrace::default();
        self.forward_traced(q, &mut trace)
    }

    pub fn forward_traced(&self, q: &[f64], trace: &mut QuadratureTrace) -> (f64, Vec<f64>) {
        let scale = 1.0 / (self.d as f64).sqrt();
        trace.q.clear();
        trace.q.extend_from_slice(q);
        trace.weights.clear();
        trace.weights.extend((0..self.p).map(|j| scale * dot(q, self.w_row(j))));
        let score = log_sum_exp_unchecked(&trace.weights);
        softmax_in_place(&mut trace.weights);
        let mut target = vec![0.0; self.d];
        for (j, &w) in trace.weights.iter().enumerate() {
            axpy(&mut target, w, self.z_row(j));
        }
        (score, target)
    }

    pub fn backward(&self, trace: &QuadratureTrace, dscore: f64, dtarget: &[f64], grad: &mut [f64], dq: Option<&mut [f64]>) {
        let d = self.d;
        let scale = 1.0 / (d as f64).sqrt();
        let w = &trace.weights;
        let dw: Vec<f64> = (0..self.p).map(|j| dot(dtarget, self.z_row(j))).collect();
        let mean_dw: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        let (gw, gz) = grad.split_at_mut(self.p * d);
        let mut dlogit = vec![0.0; self.p];
        for j in 0..self.p {
            axpy(&mut gz[j * d..(j + 1) * d], w[j], dtarget);
            dlogit[j] = scale * w[j] * (dw[j] - mean_dw + dscore);
        }
        outer_acc(gw, &dlogit, &trace.q);
        if let Some(dq) = dq {
            for (j, &g) in dlogit.iter().enumerate() {
                axpy(dq, g, self.w_row(j));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{score_alpha, target_a};
    use crate::tensor::Prng;

    fn random(p: usize, d: usize, seed: u64) -> (Matrix, Matrix) {
        let mut rng = Prng::new(seed);
        (
            Matrix::random_normal(p, d, 1.0, &mut rng),
            Matrix::random_normal(p, d, 1.0, &mut rng),
        )
    }

    #[test]
    fn parameter_count_is_two_p_d() {
        let (w, z) = random(8, 16, 1);
        assert_eq!(QuadratureModule::new(&w, &z).unwrap().param_count(), 256);
    }

    #[test]
    fn equal_rows_give_log_p_plus_logit() {
        let row = vec![0.5, -1.0, 2.0, 0.25];
        let w = Matrix::from_rows(&vec![row.clone(); 5]).unwrap();
        let z = Matrix::from_rows(&vec![vec![1.0, 2.0, 3.0, 4.0]; 5]).unwrap();
        let m = QuadratureModule::new(&w, &z).unwrap();
        let q = [1.0, 0.5, -0.5, 2.0];
        let s = dot(&q, &row) / 2.0;
        let (score, target) = m.forward(&q);
        assert!((score - (5f64.ln() + s)).abs() < 1e-14);
        for (t, want) in target.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((t - want).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_brute_force_and_oracle() {
        let (w, z) = random(3, 2, 7);
        let m = QuadratureModule::new(&w, &z).unwrap();
        let q = [0.4, -1.3];
        let logits: Vec<f64> = (0..3).map(|j| (q[0] * w.get(j, 0) + q[1] * w.get(j, 1)) / 2f64.sqrt()).collect();
        let brute_score = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
        let total: f64 = logits.iter().map(|x| x.exp()).sum();
        let brute_target: Vec<f64> = (0..2)
            .map(|c| (0..3).map(|j| logits[j].exp() / total * z.get(j, c)).sum())
            .collect();
        let (s, t) = m.forward(&q);
        assert!((s - brute_score).abs() < 1e-13);
        for c in 0..2 {
            assert!((t[c] - brute_target[c]).abs() < 1e-13);
        }
        let oracle_t = target_a(&q, &w, &z).unwrap();
        assert!((s - score_alpha(&q, &w).unwrap()).abs() <= 1e-12 * s.abs().max(1.0));
        for c in 0..2 {
            assert!((t[c] - oracle_t[c]).abs() <= 1e-12);
        }
    }

    #[test]
    fn full_and_singleton_cache_initialization() {
        let mut cache = KVCache::with_shape(1, 1, 4);
        let mut rng = Prng::new(3);
        for pos in 1..=6 {
            cache.begin_position(pos).unwrap();
            let k: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let v: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            cache.push(0, 0, &k, &v);
        }
        let q = [0.3, 1.1, -0.7, 0.2];
        let full = QuadratureModule::from_cache(&cache, 0, 0, 6).unwrap();
        let (s, t) = full.forward(&q);
        let alpha = score_alpha(&q, cache.keys(0, 0)).unwrap();
        let a = target_a(&q, cache.keys(0, 0), cache.values(0, 0)).unwrap();
        assert!((s - alpha).abs() <= 1e-12 * alpha.abs().max(1.0));
        for c in 0..4 {
            assert!((t[c] - a[c]).abs() <= 1e-12 * a[c].abs().max(1.0));
        }
        let one = QuadratureModule::from_cache(&cache, 0, 0, 1).unwrap();
        let (s, t) = one.forward(&q);
        assert!((s - dot(&q, cache.keys(0, 0).row(0)) / 2.0).abs() < 1e-15);
        assert_eq!(t, cache.values(0, 0).row(0));
        assert!(QuadratureModule::from_cache(&cache, 0, 0, 7).is_err());
        assert!(QuadratureModule::from_cache(&cache, 0, 0, 0).is_err());
    }
}
