//! Skip-to-input MLP surrogate.
//!
//! An optional shared backbone maps the query to `h`; the score head and the
//! target head then iterate the same layer form with their own weights:
//!
//! ```text
//! h_0     = σ(U_0 x + b_0)                 x = q (backbone) or h (head, D_b > 0)
//! h_{k+1} = σ(V_k q + U_k h_k + b_k)
//! ```
//!
//! with σ = SiLU and a final linear projection per head (to ℝ for the score,
//! ℝ^d for the target). Heads without a backbone read `q` directly, so their
//! first layer has no separate skip term. Layer normalization (applied to the
//! pre-activation, without affine parameters) and residual connections
//! (between equal-width layers) are optional.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{axpy, matvec_into, matvec_t_acc, outer_acc, silu, silu_grad, Prng};

const LN_EPS: f64 = 1e-5;

/// Depths `(D_b, D_s, D_t)` of backbone, score head and target head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Depths {
    pub backbone: usize,
    pub score: usize,
    pub target: usize,
}

impl Depths {
    pub const fn new(backbone: usize, score: usize, target: usize) -> Self {
        Self {
            backbone,
            score,
            target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MlpFlags {
    pub residual: bool,
    pub layer_norm: bool,
}

/// Complete shape of an MLP module. Without a backbone the two heads are
/// independent networks and may have different widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub head_dim: usize,
    pub depths: Depths,
    pub backbone_width: usize,
    pub score_width: usize,
    pub target_width: usize,
    pub flags: MlpFlags,
}

fn hidden_layer_params(input: usize, out: usize, skip: bool, d: usize) -> usize {
    out * input + if skip { out * d } else { 0 } + out
}

fn head_params(depth: usize, width: usize, input: usize, has_backbone: bool, out: usize, d: usize) -> usize {
    if depth == 0 {
        return out * input + out;
    }
    hidden_layer_params(input, width, has_backbone, d)
        + (depth - 1) * hidden_layer_params(width, width, true, d)
        + out * width
        + out
}

impl MlpShape {
    /// One width for every part.
    pub fn uniform(head_dim: usize, depths: Depths, width: usize, flags: MlpFlags) -> Self {
        Self {
            head_dim,
            depths,
            backbone_width: width,
            score_width: width,
            target_width: width,
            flags,
        }
    }

    fn head_input(&self) -> usize {
        if self.depths.backbone > 0 {
            self.backbone_width
        } else {
            self.head_dim
        }
    }

    pub fn backbone_params(&self) -> usize {
        let (d, w) = (self.head_dim, self.backbone_width);
        match self.depths.backbone {
            0 => 0,
            db => hidden_layer_params(d, w, false, d) + (db - 1) * hidden_layer_params(w, w, true, d),
        }
    }

    pub fn score_params(&self) -> usize {
        head_params(
            self.depths.score,
            self.score_width,
            self.head_input(),
            self.depths.backbone > 0,
            1,
            self.head_dim,
        )
    }

    pub fn target_params(&self) -> usize {
        head_params(
            self.depths.target,
            self.target_width,
            self.head_input(),
            self.depths.backbone > 0,
            self.head_dim,
            self.head_dim,
        )
    }

    /// Closed-form parameter count; tests check it against allocation.
    pub fn param_count(&self) -> usize {
        self.backbone_params() + self.score_params() + self.target_params()
    }

    pub fn validate(&self) -> Result<()> {
        let widths_needed = [
            (self.depths.backbone > 0, self.backbone_width),
            (self.depths.score > 0, self.score_width),
            (self.depths.target > 0, self.target_width),
        ];
        if self.head_dim == 0 || widths_needed.iter().any(|&(used, w)| used && w == 0) {
            return Err(Error::InvalidConfig(format!("degenerate MLP shape {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Hidden {
    input: usize,
    out: usize,
    u: usize,
    v: Option<usize>,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Linear {
    input: usize,
    out: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Chain {
    hidden: Vec<Hidden>,
    head: Option<Linear>,
}

struct Layout {
    cursor: usize,
    d: usize,
}

impl Layout {
    fn hidden(&mut self, input: usize, out: usize, skip: bool) -> Hidden {
        let u = self.cursor;
        self.cursor += out * input;
        let v = skip.then(|| {
            let v = self.cursor;
            self.cursor += out * self.d;
            v
        });
        let b = self.cursor;
        self.cursor += out;
        Hidden { input, out, u, v, b }
    }

    fn linear(&mut self, input: usize, out: usize) -> Linear {
        let w = self.cursor;
        self.cursor += out * input;
        let b = self.cursor;
        self.cursor += out;
        Linear { input, out, w, b }
    }

    fn chain(&mut self, depth: usize, width: usize, input: usize, first_skip: bool, out: Option<usize>) -> Chain {
        let mut hidden = Vec::with_capacity(depth);
        let mut dim = input;
        for k in 0..depth {
            hidden.push(self.hidden(dim, width, k > 0 || first_skip));
            dim = width;
        }
        let head = out.map(|o| self.linear(dim, o));
        Chain { hidden, head }
    }
}

/// Intermediate values of one chain evaluation.
#[derive(Debug, Clone, Default)]
struct ChainTrace {
    inputs: Vec<Vec<f64>>,
    /// Activation inputs (post-normalization when enabled).
    pre: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
    last: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct MlpTrace {
    q: Vec<f64>,
    backbone: ChainTrace,
    score: ChainTrace,
    target: ChainTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModule {
    shape: MlpShape,
    backbone: Chain,
    score: Chain,
    target: Chain,
    params: Vec<f64>,
}

impl MlpModule {
    /// Builds the layout and fills it with zeros.
    pub fn zeros(shape: MlpShape) -> Result<Self> {
        shape.validate()?;
        let d = shape.head_dim;
        let mut layout = Layout { cursor: 0, d };
        let backbone = layout.chain(shape.depths.backbone, shape.backbone_width, d, false, None);
        let head_in = shape.head_input();
        let has_bb = shape.depths.backbone > 0;
        let score = layout.chain(shape.depths.score, shape.score_width, head_in, has_bb, Some(1));
        let target = layout.chain(shape.depths.target, shape.target_width, head_in, has_bb, Some(d));
        Ok(Self {
            shape,
            backbone,
            score,
            target,
            params: vec![0.0; layout.cursor],
        })
    }

    /// Hidden weights N(0, 1/fan_in) with fan_in counting the skip input;
    /// biases and both final projections start at zero, so a fresh module
    /// outputs score 0 and the zero target.
    pub fn init(shape: MlpShape, rng: &mut Prng) -> Result<Self> {
        let mut m = Self::zeros(shape)?;
        let d = shape.head_dim;
        let hidden: Vec<Hidden> = [&m.backbone, &m.score, &m.target]
            .iter()
            .flat_map(|c| c.hidden.iter().copied())
            .collect();
        for layer in hidden {
            let fan_in = layer.input + if layer.v.is_some() { d } else { 0 };
            let std = 1.0 / (fan_in as f64).sqrt();
            for x in &mut m.params[layer.u..layer.u + layer.out * layer.input] {
                *x = std * rng.normal();
            }
            if let Some(v) = layer.v {
                for x in &mut m.params[v..v + layer.out * d] {
                    *x = std * rng.normal();
                }
            }
        }
        Ok(m)
    }

    pub fn from_params(shape: MlpShape, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(shape)?;
        crate::error::check_dim("MlpModule::from_params", m.params.len(), params.len())?;
        m.params = params;
        Ok(m)
    }

    pub fn shape(&self) -> &MlpShape {
        &self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Named parameter ranges: `U`, `V`, `b` per hidden layer and the final
    /// projection `C`, `c` of each head.
    pub fn param_groups(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let d = self.shape.head_dim;
        let mut out = Vec::new();
        for (name, chain) in [("backbone", &self.backbone), ("score", &self.score), ("target", &self.target)] {
            for (k, l) in chain.hidden.iter().enumerate() {
                out.push((format!("{name}.U{k}"), l.u..l.u + l.out * l.input));
                if let Some(v) = l.v {
                    out.push((format!("{name}.V{k}"), v..v + l.out * d));
                }
                out.push((format!("{name}.b{k}"), l.b..l.b + l.out));
            }
            if let Some(lin) = chain.head {
                out.push((format!("{name}.C"), lin.w..lin.w + lin.out * lin.input));
                out.push((format!("{name}.c"), lin.b..lin.b + lin.out));
            }
        }
        out
    }

    pub fn forward(&self, q: &[f64]) -> (f64, Vec<f64>) {
        let mut trace = MlpTrace::default();
        self.forward_traced(q, &mut trace)
    }

    pub fn forward_traced(&self, q: &[f64], trace: &mut MlpTrace) -> (f64, Vec<f64>) {
        trace.q = q.to_vec();
        let h = if self.shape.depths.backbone > 0 {
            self.run_chain(&self.backbone, q, q, &mut trace.backbone)
        } else {
            q.to_vec()
        };
        let score = self.run_chain(&self.score, &h, q, &mut trace.score);
        let target = self.run_chain(&self.target, &h, q, &mut trace.target);
        (score[0], target)
    }

    fn run_chain(&self, chain: &Chain, input: &[f64], q: &[f64], trace: &mut ChainTrace) -> Vec<f64> {
        let p = &self.params;
        let d = self.shape.head_dim;
        let flags = self.shape.flags;
        trace.inputs.clear();
        trace.pre.clear();
        trace.inv_std.clear();
        let mut h = input.to_vec();
        for layer in &chain.hidden {
            let mut z = p[layer.b..layer.b + layer.out].to_vec();
            let mut uh = vec![0.0; layer.out];
            matvec_into(&p[layer.u..layer.u + layer.out * layer.input], layer.out, layer.input, &h, &mut uh);
            axpy(&mut z, 1.0, &uh);
            if let Some(v) = layer.v {
                let mut vq = vec![0.0; layer.out];
                matvec_into(&p[v..v + layer.out * d], layer.out, d, q, &mut vq);
                axpy(&mut z, 1.0, &vq);
            }
            let inv = if flags.layer_norm { normalize(&mut z) } else { 1.0 };
            let mut next: Vec<f64> = z.iter().map(|&x| silu(x)).collect();
            if flags.residual && layer.input == layer.out {
                axpy(&mut next, 1.0, &h);
            }
            trace.inputs.push(std::mem::replace(&mut h, next));
            trace.pre.push(z);
            trace.inv_std.push(inv);
        }
        trace.last = h;
        match chain.head {
            Some(lin) => {
                let mut y = vec![0.0; lin.out];
                matvec_into(&p[lin.w..lin.w + lin.out * lin.input], lin.out, lin.input, &trace.last, &mut y);
                axpy(&mut y, 1.0, &p[lin.b..lin.b + lin.out]);
                y
            }
            None => trace.last.clone(),
        }
    }

    /// Accumulates parameter gradients into `grad` (same layout as the
    /// parameters) and, when given, the input gradient into `dq`.
    pub fn backward(&self, trace: &MlpTrace, dscore: f64, dtarget: &[f64], grad: &mut [f64], dq: Option<&mut [f64]>) {
        let d = self.shape.head_dim;
        let mut dq_acc = vec![0.0; d];
        let mut dh = self.back_chain(&self.score, &trace.score, &[dscore], &trace.q, grad, &mut dq_acc);
        let dh_t = self.back_chain(&self.target, &trace.target, dtarget, &trace.q, grad, &mut dq_acc);
        axpy(&mut dh, 1.0, &dh_t);
        if self.shape.depths.backbone > 0 {
            let dx = self.back_chain(&self.backbone, &trace.backbone, &dh, &trace.q, grad, &mut dq_acc);
            axpy(&mut dq_acc, 1.0, &dx);
        } else {
            axpy(&mut dq_acc, 1.0, &dh);
        }
        if let Some(dq) = dq {
            axpy(dq, 1.0, &dq_acc);
        }
    }

    fn back_chain(&self, chain: &Chain, trace: &ChainTrace, dout: &[f64], q: &[f64], grad: &mut [f64], dq: &mut [f64]) -> Vec<f64> {
        let p = &self.params;
        let d = self.shape.head_dim;
        let flags = self.shape.flags;
        let mut dh = match chain.head {
            Some(lin) => {
                outer_acc(&mut grad[lin.w..lin.w + lin.out * lin.input], dout, &trace.last);
                axpy(&mut grad[lin.b..lin.b + lin.out], 1.0, dout);
                let mut dh = vec![0.0; lin.input];
                matvec_t_acc(&p[lin.w..lin.w + lin.out * lin.input], lin.out, lin.input, dout, &mut dh);
                dh
            }
            None => dout.to_vec(),
        };
        for (k, layer) in chain.hidden.iter().enumerate().rev() {
            let pre = &trace.pre[k];
            let input = &trace.inputs[k];
            let mut dz: Vec<f64> = dh.iter().zip(pre).map(|(g, &z)| g * silu_grad(z)).collect();
            if flags.layer_norm {
                normalize_backward(&mut dz, pre, trace.inv_std[k]);
            }
            outer_acc(&mut grad[layer.u..layer.u + layer.out * layer.input], &dz, input);
            axpy(&mut grad[layer.b..layer.b + layer.out], 1.0, &dz);
            if let Some(v) = layer.v {
                outer_acc(&mut grad[v..v + layer.out * d], &dz, q);
                matvec_t_acc(&p[v..v + layer.out * d], layer.out, d, &dz, dq);
            }
            let mut din = if flags.residual && layer.input == layer.out {
                dh.clone()
            } else {
                vec![0.0; layer.input]
            };
            matvec_t_acc(&p[layer.u..layer.u + layer.out * layer.input], layer.out, layer.input, &dz, &mut din);
            dh = din;
        }
        dh
    }
}

/// In-place zero-mean unit-variance normalization; returns `1/σ`.
fn normalize(z: &mut [f64]) -> f64 {
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for x in z.iter_mut() {
        *x = (*x - mean) * inv;
    }
    inv
}

/// Pulls `dy` (gradient w.r.t. the normalized `y`) back to the raw input.
fn normalize_backward(dy: &mut [f64], y: &[f64], inv: f64) {
    let n = dy.len() as f64;
    let mean_dy = dy.iter().sum::<f64>() / n;
    let mean_dyy = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
    for (g, &yi) in dy.iter_mut().zip(y) {
        *g = inv * (*g - mean_dy - yi * mean_dyy);
    }
}
