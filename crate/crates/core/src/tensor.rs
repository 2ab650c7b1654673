//! Dense 64-bit kernels and the deterministic random stream.
//!
//! Every reduction runs left to right in index order, so results are
//! bit-reproducible for identical inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("Matrix::from_vec", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim("Matrix::from_rows", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut Prng) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        check_dim("Matrix::push_row", self.cols, row.len())?;
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// First `count` rows as a new matrix.
    pub fn head_rows(&self, count: usize) -> Result<Self> {
        if count > self.rows {
            return Err(Error::InvalidArgument(format!(
                "requested {count} rows from a {}-row matrix",
                self.rows
            )));
        }
        Ok(Self {
            rows: count,
            cols: self.cols,
            data: self.data[..count * self.cols].to_vec(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn random_normal(dim: usize, std: f64, rng: &mut Prng) -> Self {
        Self((0..dim).map(|_| std * rng.normal()).collect())
    }
}

impl std::ops::Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `out += scale * x`
#[inline]
pub fn axpy(out: &mut [f64], scale: f64, x: &[f64]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o += scale * v;
    }
}

pub fn squared_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let t = x - y;
        acc += t * t;
    }
    acc
}

pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vector> {
    check_dim("matvec", m.cols, v.len())?;
    let mut out = vec![0.0; m.rows];
    matvec_into(m.data(), m.rows, m.cols, v, &mut out);
    Ok(Vector(out))
}

/// Unchecked row-major product over a raw slice, used on hot paths where
/// shapes are fixed by construction.
#[inline]
pub fn matvec_into(data: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(data.len(), rows * cols);
    for (i, o) in out.iter_mut().enumerate().take(rows) {
        *o = dot(&data[i * cols..(i + 1) * cols], v);
    }
}

/// `out += Mᵀ g` for row-major `M` (rows × cols), `g` of length rows.
#[inline]
pub fn matvec_t_acc(data: &[f64], rows: usize, cols: usize, g: &[f64], out: &mut [f64]) {
    for (i, &gi) in g.iter().enumerate().take(rows) {
        if gi != 0.0 {
            axpy(out, gi, &data[i * cols..(i + 1) * cols]);
        }
    }
}

/// `grad += g xᵀ` for a row-major rows × cols gradient buffer.
#[inline]
pub fn outer_acc(grad: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (i, &gi) in g.iter().enumerate() {
        if gi != 0.0 {
            axpy(&mut grad[i * cols..(i + 1) * cols], gi, x);
        }
    }
}

/// Stable `log Σ exp(s_j)`.
pub fn log_sum_exp(s: &[f64]) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::Empty("log_sum_exp"));
    }
    Ok(log_sum_exp_unchecked(s))
}

#[inline]
pub(crate) fn log_sum_exp_unchecked(s: &[f64]) -> f64 {
    if s.len() == 1 {
        return s[0];
    }
    let m = max_of(s);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let mut acc = 0.0;
    for &x in s {
        acc += (x - m).exp();
    }
    m + acc.ln()
}

/// Max-shifted softmax.
pub fn softmax(s: &[f64]) -> Vector {
    let mut out = s.to_vec();
    softmax_in_place(&mut out);
    Vector(out)
}

pub fn softmax_in_place(s: &mut [f64]) {
    if s.is_empty() {
        return;
    }
    let m = max_of(s);
    let mut total = 0.0;
    for x in s.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    let inv = 1.0 / total;
    for x in s.iter_mut() {
        *x *= inv;
    }
}

#[inline]
fn max_of(s: &[f64]) -> f64 {
    s.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Index of the first maximal entry; 0 for an empty slice.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx silu(x) = σ(x)(1 + x(1 − σ(x))).
#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Deterministic splittable random stream.
///
/// Backed by ChaCha8 keyed from a 64-bit seed. `split(id)` derives a child
/// seed through the SplitMix64 finalizer, so substreams are reproducible
/// from `(seed, id)` alone and do not depend on how much of the parent
/// stream has been consumed.
#[derive(Debug, Clone)]
pub struct Prng {
    seed: u64,
    rng: ChaCha8Rng,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn split(&self, id: u64) -> Self {
        Self::new(mix64(self.seed ^ mix64(id.wrapping_add(0x9e37_79b9_7f4a_7c15))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }

    /// Uniform integer in `[0, bound)`.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "Prng::below(0)");
        self.rng.random_range(0..bound)
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
