//! Minimal reverse-mode tape over vector-valued nodes.
//!
//! The op set covers what the blended forward pass needs: frozen matrix
//! products, RMS normalization, rotary rotation, SiLU, slicing and
//! concatenation, the blended softmax against local keys and values,
//! surrogate module calls, log-sum-exp, and a KL divergence to a fixed
//! teacher distribution. Frozen operands are borrowed, never copied.

use crate::blend::SCORE_FLOOR;
use crate::error::{Error, Result};
use crate::model::Rope;
use crate::surrogate::{ModuleTrace, SurrogateStack};
use crate::tensor::{axpy, dot, log_sum_exp_unchecked, matvec_into, matvec_t_acc, silu, silu_grad, softmax_in_place};

const RMS_EPS: f64 = crate::model::RMS_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<'a> {
    /// Constant input; no gradient is propagated further.
    Const,
    /// Input whose gradient is read back after `backward`.
    Leaf,
    MatVec {
        data: &'a [f64],
        rows: usize,
        cols: usize,
        x: NodeId,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    RmsNorm {
        x: NodeId,
        gain: &'a [f64],
    },
    Rope {
        x: NodeId,
        rope: &'a Rope,
        pos: usize,
    },
    Silu(NodeId),
    Slice {
        x: NodeId,
        start: usize,
    },
    Concat(Vec<NodeId>),
    /// Blended attention; stores its softmax weights.
    Blend {
        q: NodeId,
        score: NodeId,
        target: NodeId,
        keys: Vec<NodeId>,
        values: Vec<NodeId>,
        weights: Vec<f64>,
    },
    /// `[score ∥ target]` of one stack module at `q`.
    Module {
        module: usize,
        q: NodeId,
        trace: Box<ModuleTrace>,
    },
    Lse(NodeId),
    /// `KL(p ‖ softmax(x))` for a fixed `p`.
    Kl {
        x: NodeId,
        p: Vec<f64>,
    },
    Sum(Vec<NodeId>),
}

struct Node<'a> {
    op: Op<'a>,
    value: Vec<f64>,
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    stack: Option<&'a SurrogateStack>,
}

/// Adjoints after a backward sweep.
pub struct Gradients {
    adjoints: Vec<Vec<f64>>,
    /// Per stack module, in parameter layout.
    pub modules: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn of(&self, node: NodeId) -> &[f64] {
        &self.adjoints[node.0]
    }
}

impl<'a> Default for Tape<'a> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            stack: None,
        }
    }

    /// A tape whose `module` nodes evaluate modules of `stack`.
    pub fn with_stack(stack: &'a SurrogateStack) -> Self {
        Self {
            nodes: Vec::new(),
            stack: Some(stack),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeId) -> &[f64] {
        &self.nodes[node.0].value
    }

    pub fn scalar(&self, node: NodeId) -> f64 {
        self.nodes[node.0].value[0]
    }

    fn push(&mut self, op: Op<'a>, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// `M x` for a frozen row-major `rows × cols` matrix.
    pub fn matvec(&mut self, data: &'a [f64], rows: usize, cols: usize, x: NodeId) -> NodeId {
        let mut out = vec![0.0; rows];
        matvec_into(data, rows, cols, self.value(x), &mut out);
        self.push(Op::MatVec { data, rows, cols, x }, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).to_vec();
        axpy(&mut out, 1.0, self.value(b));
        self.push(Op::Add(a, b), out)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).iter().map(|v| c * v).collect();
        self.push(Op::Scale(x, c), out)
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: &'a [f64]) -> NodeId {
        let mut out = vec![0.0; gain.len()];
        crate::model::rms_norm(self.value(x), gain, &mut out);
        self.push(Op::RmsNorm { x, gain }, out)
    }

    pub fn rope(&mut self, x: NodeId, rope: &'a Rope, pos: usize) -> NodeId {
        let mut out = self.value(x).to_vec();
        rope.rotate_in_place(&mut out, pos);
        self.push(Op::Rope { x, rope, pos }, out)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).iter().map(|&v| silu(v)).collect();
        self.push(Op::Silu(x), out)
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let out = self.value(x)[start..start + len].to_vec();
        self.push(Op::Slice { x, start }, out)
    }

    pub fn concat(&mut self, parts: Vec<NodeId>) -> NodeId {
        let out = parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
        self.push(Op::Concat(parts), out)
    }

    /// Blended attention of `q` over `[score ∥ ⟨q, k_j⟩/√d]` with values
    /// `[target ∥ v_j]`. Scores below the floor are clamped (and then carry
    /// no gradient).
    pub fn blend(&mut self, q: NodeId, score: NodeId, target: NodeId, keys: Vec<NodeId>, values: Vec<NodeId>) -> NodeId {
        let qv = self.value(q);
        let scale = 1.0 / (qv.len() as f64).sqrt();
        let mut weights = Vec::with_capacity(keys.len() + 1);
        weights.push(self.scalar(score).max(SCORE_FLOOR));
        weights.extend(keys.iter().map(|&k| scale * dot(qv, self.value(k))));
        softmax_in_place(&mut weights);
        let mut out = vec![0.0; qv.len()];
        axpy(&mut out, weights[0], self.value(target));
        for (j, &v) in values.iter().enumerate() {
            axpy(&mut out, weights[j + 1], self.value(v));
        }
        self.push(
            Op::Blend {
                q,
                score,
                target,
                keys,
                values,
                weights,
            },
            out,
        )
    }

    /// `[score ∥ target]` of module `module` of the attached stack.
    pub fn module(&mut self, module: usize, q: NodeId) -> NodeId {
        let stack = self.stack.expect("tape has no surrogate stack");
        let mut trace = Box::<ModuleTrace>::default();
        let (s, t) = stack.modules()[module].forward_traced(self.value(q), &mut trace);
        let mut out = Vec::with_capacity(t.len() + 1);
        out.push(s);
        out.extend(t);
        self.push(Op::Module { module, q, trace }, out)
    }

    pub fn lse(&mut self, x: NodeId) -> NodeId {
        let v = log_sum_exp_unchecked(self.value(x));
        self.push(Op::Lse(x), vec![v])
    }

    /// `KL(softmax(teacher) ‖ softmax(x))`.
    pub fn kl_to_teacher(&mut self, teacher_logits: &[f64], x: NodeId) -> NodeId {
        let mut p = teacher_logits.to_vec();
        softmax_in_place(&mut p);
        let lse_t = log_sum_exp_unchecked(teacher_logits);
        let xv = self.value(x);
        let lse_x = log_sum_exp_unchecked(xv);
        let kl: f64 = p
            .iter()
            .zip(teacher_logits.iter().zip(xv))
            .filter(|(&pi, _)| pi > 0.0)
            .map(|(&pi, (&t, &s))| pi * ((t - lse_t) - (s - lse_x)))
            .sum();
        self.push(Op::Kl { x, p }, vec![kl.max(0.0)])
    }

    pub fn sum(&mut self, parts: Vec<NodeId>) -> NodeId {
        let total = parts.iter().map(|&p| self.scalar(p)).sum();
        self.push(Op::Sum(parts), vec![total])
    }

    /// Reverse sweep from the scalar `root`, seeded with `seed`.
    pub fn backward(&self, root: NodeId, seed: f64) -> Result<Gradients> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::InvalidArgument("backward root must be scalar".into()));
        }
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        let mut modules: Vec<Vec<f64>> = match self.stack {
            Some(s) => s.modules().iter().map(|m| vec![0.0; m.param_count()]).collect(),
            None => Vec::new(),
        };
        adj[root.0][0] = seed;
        for i in (0..=root.0).rev() {
            if adj[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            let node = &self.nodes[i];
            match &node.op {
                Op::Const | Op::Leaf => {}
                Op::MatVec { data, rows, cols, x } => {
                    matvec_t_acc(data, *rows, *cols, &g, &mut adj[x.0]);
                }
                Op::Add(a, b) => {
                    axpy(&mut adj[a.0], 1.0, &g);
                    axpy(&mut adj[b.0], 1.0, &g);
                }
                Op::Scale(x, c) => axpy(&mut adj[x.0], *c, &g),
                Op::RmsNorm { x, gain } => {
                    let xv = &self.nodes[x.0].value;
                    let n = xv.len() as f64;
                    let r = 1.0 / (dot(xv, xv) / n + RMS_EPS).sqrt();
                    let s: f64 = g.iter().zip(gain.iter()).zip(xv).map(|((gi, wi), xi)| gi * wi * xi).sum();
                    let dx = &mut adj[x.0];
                    for j in 0..xv.len() {
                        dx[j] += r * gain[j] * g[j] - r * r * r * xv[j] * s / n;
                    }
                }
                Op::Rope { x, rope, pos } => {
                    let mut back = g.clone();
                    rope.rotate_back_in_place(&mut back, *pos);
                    axpy(&mut adj[x.0], 1.0, &back);
                }
                Op::Silu(x) => {
                    let xv = &self.nodes[x.0].value;
                    for (j, gj) in g.iter().enumerate() {
                        adj[x.0][j] += gj * silu_grad(xv[j]);
                    }
                }
                Op::Slice { x, start } => {
                    axpy(&mut adj[x.0][*start..*start + g.len()], 1.0, &g);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        axpy(&mut adj[p.0], 1.0, &g[off..off + len]);
                        off += len;
                    }
                }
                Op::Blend {
                    q,
                    score,
                    target,
                    keys,
                    values,
                    weights,
                } => {
                    let qv = &self.nodes[q.0].value;
                    let scale = 1.0 / (qv.len() as f64).sqrt();
                    let mut dw = Vec::with_capacity(weights.len());
                    dw.push(dot(&g, &self.nodes[target.0].value));
                    dw.extend(values.iter().map(|v| dot(&g, &self.nodes[v.0].value)));
                    let mean: f64 = weights.iter().zip(&dw).map(|(a, b)| a * b).sum();
                    axpy(&mut adj[target.0], weights[0], &g);
                    for (j, v) in values.iter().enumerate() {
                        axpy(&mut adj[v.0], weights[j + 1], &g);
                    }
                    if self.nodes[score.0].value[0] >= SCORE_FLOOR {
                        adj[score.0][0] += weights[0] * (dw[0] - mean);
                    }
                    for (j, k) in keys.iter().enumerate() {
                        let dz = weights[j + 1] * (dw[j + 1] - mean) * scale;
                        axpy(&mut adj[q.0], dz, &self.nodes[k.0].value);
                        axpy(&mut adj[k.0], dz, qv);
                    }
                }
                Op::Module { module, q, trace } => {
                    let stack = self.stack.expect("module node without stack");
                    let m = &stack.modules()[*module];
                    let mut dq = vec![0.0; self.nodes[q.0].value.len()];
                    m.backward(trace, g[0], &g[1..], &mut modules[*module], Some(&mut dq));
                    axpy(&mut adj[q.0], 1.0, &dq);
                }
                Op::Lse(x) => {
                    let mut w = self.nodes[x.0].value.clone();
                    softmax_in_place(&mut w);
                    axpy(&mut adj[x.0], g[0], &w);
                }
                Op::Kl { x, p } => {
                    let mut w = self.nodes[x.0].value.clone();
                    softmax_in_place(&mut w);
                    for (j, pj) in p.iter().enumerate() {
                        adj[x.0][j] += g[0] * (w[j] - pj);
                    }
                }
                Op::Sum(parts) => {
                    for p in parts {
                        adj[p.0][0] += g[0];
                    }
                }
            }
            adj[i] = g;
        }
        Ok(Gradients { adjoints: adj, modules })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Matrix, Prng};

    /// Central-difference check of `f` at `x` against `grad`.
    fn fd_check(x: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
            assert!(err <= 1e-5, "component {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn lse_gradient_is_softmax_weighted_keys() {
        let mut rng = Prng::new(2);
        let k = Matrix::random_normal(7, 4, 1.0, &mut rng);
        let q: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let mut tape = Tape::new();
        let qn = tape.leaf(q.clone());
        let s = tape.matvec(k.data(), 7, 4, qn);
        let l = tape.lse(s);
        let g = tape.backward(l, 1.0).unwrap();
        let mut w: Vec<f64> = (0..7).map(|j| dot(k.row(j), &q)).collect();
        softmax_in_place(&mut w);
        for c in 0..4 {
            let want: f64 = (0..7).map(|j| w[j] * k.get(j, c)).sum();
            assert!((g.of(qn)[c] - want).abs() < 1e-12);
        }
    }

    fn chain_value(x: &[f64], gain: &[f64], rope: &Rope, teacher: &[f64]) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let xn = tape.leaf(x.to_vec());
        let n = tape.rms_norm(xn, gain);
        let r = tape.rope(n, rope, 3);
        let s = tape.silu(r);
        let a = tape.slice(s, 0, 2);
        let b = tape.slice(r, 2, 2);
        let c = tape.concat(vec![b, a]);
        let d = tape.add(c, r);
        let e = tape.scale(d, 0.7);
        let kl = tape.kl_to_teacher(teacher, e);
        let l = tape.lse(e);
        let total = tape.sum(vec![kl, l]);
        let g = tape.backward(total, 1.0).unwrap();
        (tape.scalar(total), g.of(xn).to_vec())
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let rope = Rope::new(4, 10000.0).unwrap();
        let gain = [1.1, 0.9, -0.5, 2.0];
        let teacher = [0.3, -1.0, 2.0, 0.1];
        let x = [0.4, -1.2, 0.8, 0.05];
        let (_, g) = chain_value(&x, &gain, &rope, &teacher);
        fd_check(&x, &g, |x| chain_value(x, &gain, &rope, &teacher).0);
    }

    fn blend_value(inputs: &[f64], seed: &[f64]) -> (f64, Vec<f64>) {
        // inputs: q (2), score (1), target (2), k (2), v (2)
        let mut tape = Tape::new();
        let x = tape.leaf(inputs.to_vec());
        let q = tape.slice(x, 0, 2);
        let s = tape.slice(x, 2, 1);
        let t = tape.slice(x, 3, 2);
        let k = tape.slice(x, 5, 2);
        let v = tape.slice(x, 7, 2);
        let out = tape.blend(q, s, t, vec![k], vec![v]);
        let wm = tape.matvec(seed, 1, 2, out);
        let g = tape.backward(wm, 1.0).unwrap();
        (tape.scalar(wm), g.of(x).to_vec())
    }

    #[test]
    fn blend_gradient_one_local_token() {
        let inputs = [0.5, -0.3, 0.2, 1.0, -2.0, 0.7, 0.4, -0.6, 1.5];
        let seed = [0.8, -1.1];
        let (_, g) = blend_value(&inputs, &seed);
        fd_check(&inputs, &g, |x| blend_value(x, &seed).0);
    }

    #[test]
    fn zero_seed_gives_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0]);
        let l = tape.lse(x);
        let g = tape.backward(l, 0.0).unwrap();
        assert_eq!(g.of(x), &[0.0, 0.0]);
        assert!(tape.backward(x, 1.0).is_err());
    }
}
