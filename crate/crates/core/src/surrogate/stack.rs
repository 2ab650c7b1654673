//! One module per (layer, KV head), shared by the query heads of the group.

use serde::{Deserialize, Serialize};

use super::capacity::{mlp_shape_for_budget, plan_capacity, quadrature_points, CapacityPlan, LayerGroup};
use super::mlp::{Depths, MlpFlags, MlpModule, MlpShape, MlpTrace};
use super::quadrature::{QuadratureModule, QuadratureTrace};
use crate::codec::{Reader, Writer};
use crate::error::{Error, FileKind, Result};
use crate::model::{KVCache, ModelConfig};
use crate::tensor::Prng;

const STACK_MAGIC: &[u8; 8] = b"KVSSURR\0";
const STACK_VERSION: u32 = 1;

fn default_score_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurrogateFamily {
    Quadrature,
    Mlp {
        depths: Depths,
        #[serde(default)]
        flags: MlpFlags,
        /// Share of the module budget given to the score head when there is
        /// no shared backbone.
        #[serde(default = "default_score_fraction")]
        score_fraction: f64,
    },
}

impl SurrogateFamily {
    pub fn mlp(depths: Depths) -> Self {
        Self::Mlp {
            depths,
            flags: MlpFlags::default(),
            score_fraction: default_score_fraction(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Quadrature => "quadrature",
            Self::Mlp { .. } => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum SurrogateModule {
    Quadrature(QuadratureModule),
    Mlp(MlpModule),
}

#[derive(Debug, Clone, Default)]
pub struct ModuleTrace {
    quad: QuadratureTrace,
    mlp: MlpTrace,
}

impl SurrogateModule {
    pub fn forward(&self, q: &[f64]) -> (f64, Vec<f64>) {
        match self {
            Self::Quadrature(m) => m.forward(q),
            Self::Mlp(m) => m.forward(q),
        }
    }

    pub fn forward_traced(&self, q: &[f64], trace: &mut ModuleTrace) -> (f64, Vec<f64>) {
        match self {
            Self::Quadrature(m) => m.forward_traced(q, &mut trace.quad),
            Self::Mlp(m) => m.forward_traced(q, &mut trace.mlp),
        }
    }

    /// Accumulates `∂/∂θ` into `grad` and `∂/∂q` into `dq` for the upstream
    /// gradients of score and target at the traced evaluation.
    pub fn backward(&self, trace: &ModuleTrace, dscore: f64, dtarget: &[f64], grad: &mut [f64], dq: Option<&mut [f64]>) {
        match self {
            Self::Quadrature(m) => m.backward(&trace.quad, dscore, dtarget, grad, dq),
            Self::Mlp(m) => m.backward(&trace.mlp, dscore, dtarget, grad, dq),
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Self::Quadrature(m) => m.params(),
            Self::Mlp(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Self::Quadrature(m) => m.params_mut(),
            Self::Mlp(m) => m.params_mut(),
        }
    }

    pub fn param_groups(&self) -> Vec<(String, std::ops::Range<usize>)> {
        match self {
            Self::Quadrature(m) => {
                let half = m.param_count() / 2;
                vec![("W".into(), 0..half), ("Z".into(), half..2 * half)]
            }
            Self::Mlp(m) => m.param_groups(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateStack {
    family: SurrogateFamily,
    plan: CapacityPlan,
    layers: usize,
    kv_heads: usize,
    group_size: usize,
    head_dim: usize,
    /// Binds the stack to one frozen model and context.
    key_hash: u64,
    modules: Vec<SurrogateModule>,
}

/// Builds every module of the stack. Quadrature modules start from the first
/// `p` cache rows of their head; MLP modules draw from the substream
/// `seed.split(ℓ·H_kv + h)`.
pub fn init_surrogate_stack(
    family: SurrogateFamily,
    plan: &CapacityPlan,
    cfg: &ModelConfig,
    cache: &KVCache,
    key_hash: u64,
    seed: u64,
) -> Result<SurrogateStack> {
    if plan.layers() != cfg.layers || plan.head_dim != cfg.head_dim || plan.context_len != cache.len() {
        return Err(Error::InvalidConfig(format!(
            "capacity plan (L={}, d={}, n={}) does not match model (L={}, d={}) and cache (n={})",
            plan.layers(),
            plan.head_dim,
            plan.context_len,
            cfg.layers,
            cfg.head_dim,
            cache.len()
        )));
    }
    if cache.layers() != cfg.layers || cache.kv_heads() != cfg.kv_heads || cache.head_dim() != cfg.head_dim {
        return Err(Error::InvalidConfig("context cache shape does not match model".into()));
    }
    let root = Prng::new(seed);
    let mut modules = Vec::with_capacity(cfg.layers * cfg.kv_heads);
    for (layer, &budget) in plan.budgets.iter().enumerate() {
        for h in 0..cfg.kv_heads {
            let module = match family {
                SurrogateFamily::Quadrature => {
                    let p = quadrature_points(budget, cfg.head_dim)?;
                    SurrogateModule::Quadrature(QuadratureModule::from_cache(cache, layer, h, p)?)
                }
                SurrogateFamily::Mlp {
                    depths,
                    flags,
                    score_fraction,
                } => {
                    let shape = mlp_shape_for_budget(budget, cfg.head_dim, depths, flags, score_fraction)?;
                    let mut rng = root.split((layer * cfg.kv_heads + h) as u64);
                    SurrogateModule::Mlp(MlpModule::init(shape, &mut rng)?)
                }
            };
            modules.push(module);
        }
    }
    Ok(SurrogateStack {
        family,
        plan: plan.clone(),
        layers: cfg.layers,
        kv_heads: cfg.kv_heads,
        group_size: cfg.group_size,
        head_dim: cfg.head_dim,
        key_hash,
        modules,
    })
}

impl SurrogateStack {
    pub fn family(&self) -> &SurrogateFamily {
        &self.family
    }

    pub fn plan(&self) -> &CapacityPlan {
        &self.plan
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn key_hash(&self) -> u64 {
        self.key_hash
    }

    pub fn check_key(&self, expected: u64) -> Result<()> {
        if self.key_hash != expected {
            return Err(Error::HashMismatch {
                kind: FileKind::SurrogateCheckpoint,
                expected,
                found: self.key_hash,
            });
        }
        Ok(())
    }

    pub fn module_count(&self) -> usize {
        self.modules.len()
    }

    /// Index of the module serving a query head: all `G` query heads of a
    /// KV group map to the same id.
    pub fn module_id(&self, layer: usize, query_head: usize) -> usize {
        layer * self.kv_heads + query_head / self.group_size
    }

    pub fn module(&self, layer: usize, kv_head: usize) -> &SurrogateModule {
        &self.modules[layer * self.kv_heads + kv_head]
    }

    pub fn module_for_query(&self, layer: usize, query_head: usize) -> &SurrogateModule {
        &self.modules[self.module_id(layer, query_head)]
    }

    pub fn modules(&self) -> &[SurrogateModule] {
        &self.modules
    }

    pub fn modules_mut(&mut self) -> &mut [SurrogateModule] {
        &mut self.modules
    }

    pub fn total_params(&self) -> usize {
        self.modules.iter().map(SurrogateModule::param_count).sum()
    }

    /// `ρ·2nd·L·H_kv`, the unrounded stack budget.
    pub fn target_params(&self) -> f64 {
        self.plan.target_total() * self.kv_heads as f64
    }

    /// Budget left unused by integer sizing, summed over modules.
    pub fn leftover_params(&self) -> usize {
        self.modules
            .iter()
            .enumerate()
            .map(|(i, m)| self.plan.budgets[i / self.kv_heads] - m.param_count())
            .sum()
    }

    /// Checkpoint bytes.
    ///
    /// ```text
    /// magic    8 bytes "KVSSURR\0"
    /// version  u32     1
    /// key      u64     context key of the frozen model and context
    /// shape    u32 × 4 layers, kv_heads, group_size, head_dim
    /// family   u8 0 = quadrature | 1 = mlp, then for mlp:
    ///          u32 × 3 depths, u8 flags (bit 0 residual, bit 1 layer norm),
    ///          f64 score fraction
    /// plan     f64 rho, u64 context length, u32 group count,
    ///          per group (u32 start, u32 end, f64 multiplier)
    /// modules  L·H_kv blocks, layer-major: shape (u32 p | u32 × 3 widths),
    ///          u64 parameter count, f64 parameters
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(STACK_MAGIC);
        w.u32(STACK_VERSION);
        w.u64(self.key_hash);
        for v in [self.layers, self.kv_heads, self.group_size, self.head_dim] {
            w.u32(v as u32);
        }
        match self.family {
            SurrogateFamily::Quadrature => w.u8(0),
            SurrogateFamily::Mlp {
                depths,
                flags,
                score_fraction,
            } => {
                w.u8(1);
                w.u32(depths.backbone as u32);
                w.u32(depths.score as u32);
                w.u32(depths.target as u32);
                w.u8(flags.residual as u8 | (flags.layer_norm as u8) << 1);
                w.f64(score_fraction);
            }
        }
        w.f64(self.plan.rho);
        w.u64(self.plan.context_len as u64);
        w.u32(self.plan.groups.len() as u32);
        for g in &self.plan.groups {
            w.u32(g.start as u32);
            w.u32(g.end as u32);
            w.f64(g.multiplier);
        }
        for m in &self.modules {
            match m {
                SurrogateModule::Quadrature(q) => w.u32(q.points() as u32),
                SurrogateModule::Mlp(m) => {
                    let s = m.shape();
                    w.u32(s.backbone_width as u32);
                    w.u32(s.score_width as u32);
                    w.u32(s.target_width as u32);
                }
            }
            w.u64(m.param_count() as u64);
            w.f64s(m.params());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(FileKind::SurrogateCheckpoint, bytes);
        r.magic(STACK_MAGIC)?;
        r.version(STACK_VERSION)?;
        let key_hash = r.u64()?;
        let layers = r.u32_count()?;
        let kv_heads = r.u32_count()?;
        let group_size = r.u32_count()?;
        let head_dim = r.u32_count()?;
        if layers == 0 || kv_heads == 0 || group_size == 0 || head_dim == 0 || layers > 4096 || kv_heads > 4096 {
            return Err(r.malformed("degenerate stack shape"));
        }
        let family = match r.u8()? {
            0 => SurrogateFamily::Quadrature,
            1 => {
                let depths = Depths::new(r.u32_count()?, r.u32_count()?, r.u32_count()?);
                if depths.backbone.max(depths.score).max(depths.target) > 1024 {
                    return Err(r.malformed("implausible depth"));
                }
                let bits = r.u8()?;
                if bits > 3 {
                    return Err(r.malformed(format!("unknown flag bits {bits:#x}")));
                }
                let flags = MlpFlags {
                    residual: bits & 1 != 0,
                    layer_norm: bits & 2 != 0,
                };
                SurrogateFamily::Mlp {
                    depths,
                    flags,
                    score_fraction: r.f64()?,
                }
            }
            t => return Err(r.malformed(format!("unknown family tag {t}"))),
        };
        let rho = r.f64()?;
        let context_len = r.count()?;
        let group_count = r.u32_count()?;
        if group_count > layers {
            return Err(r.malformed("more layer groups than layers"));
        }
        let mut groups = Vec::with_capacity(group_count);
        for _ in 0..group_count {
            groups.push(LayerGroup {
                start: r.u32_count()?,
                end: r.u32_count()?,
                multiplier: r.f64()?,
            });
        }
        let plan = plan_capacity(rho, context_len, head_dim, layers, &groups)
            .map_err(|e| r.malformed(format!("capacity plan: {e}")))?;
        let mut modules = Vec::with_capacity(layers * kv_heads);
        for i in 0..layers * kv_heads {
            let budget = plan.budgets[i / kv_heads];
            let expected = match family {
                SurrogateFamily::Quadrature => {
                    let p = r.u32_count()?;
                    if p == 0 || p > context_len || p.saturating_mul(2 * head_dim) > budget {
                        return Err(r.malformed(format!("module {i}: {p} points exceed its budget")));
                    }
                    ModuleShape::Quad(p)
                }
                SurrogateFamily::Mlp { depths, flags, .. } => {
                    let widths = [r.u32_count()?, r.u32_count()?, r.u32_count()?];
                    if widths.iter().any(|&w| w > budget) {
                        return Err(r.malformed(format!("module {i}: width exceeds its budget")));
                    }
                    let shape = MlpShape {
                        head_dim,
                        depths,
                        backbone_width: widths[0],
                        score_width: widths[1],
                        target_width: widths[2],
                        flags,
                    };
                    shape.validate().map_err(|e| r.malformed(format!("module {i}: {e}")))?;
                    if shape.param_count() > budget {
                        return Err(r.malformed(format!("module {i}: shape exceeds its budget")));
                    }
                    ModuleShape::Mlp(shape)
                }
            };
            let count = r.count()?;
            let want = match expected {
                ModuleShape::Quad(p) => 2 * p * head_dim,
                ModuleShape::Mlp(s) => s.param_count(),
            };
            if count != want {
                return Err(r.malformed(format!("module {i}: {count} parameters, shape needs {want}")));
            }
            let params = r.f64s(count)?;
            modules.push(match expected {
                ModuleShape::Quad(p) => SurrogateModule::Quadrature(QuadratureModule::from_params(p, head_dim, params)?),
                ModuleShape::Mlp(s) => SurrogateModule::Mlp(MlpModule::from_params(s, params)?),
            });
        }
        r.expect_end()?;
        Ok(Self {
            family,
            plan,
            layers,
            kv_heads,
            group_size,
            head_dim,
            key_hash,
            modules,
        })
    }
}

enum ModuleShape {
    Quad(usize),
    Mlp(MlpShape),
}
