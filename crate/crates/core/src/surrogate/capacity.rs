//! Parameter budgets per layer and the integer sizing of modules to them.

use serde::{Deserialize, Serialize};

use super::mlp::{Depths, MlpFlags, MlpShape};
use crate::error::{Error, Result};

/// A half-open layer range sharing one budget multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerGroup {
    pub start: usize,
    pub end: usize,
    pub multiplier: f64,
}

/// Splits `layers` into four near-equal contiguous groups with the default
/// multipliers `(1, 2, 5, 2)`. For 28 layers this gives 7 layers per group;
/// use [`LayerGroup`] lists directly for uneven partitions.
pub fn default_groups(layers: usize) -> Vec<LayerGroup> {
    multiplier_groups(layers, &[1.0, 2.0, 5.0, 2.0])
}

/// Near-equal contiguous groups, one per multiplier; groups that would be
/// empty (fewer layers than multipliers) are dropped.
pub fn multiplier_groups(layers: usize, multipliers: &[f64]) -> Vec<LayerGroup> {
    let g = multipliers.len();
    multipliers
        .iter()
        .enumerate()
        .map(|(i, &m)| LayerGroup {
            start: i * layers / g,
            end: (i + 1) * layers / g,
            multiplier: m,
        })
        .filter(|grp| grp.end > grp.start)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityPlan {
    pub rho: f64,
    pub context_len: usize,
    pub head_dim: usize,
    pub groups: Vec<LayerGroup>,
    /// Parameters per module, indexed by layer.
    pub budgets: Vec<usize>,
}

impl CapacityPlan {
    pub fn layers(&self) -> usize {
        self.budgets.len()
    }

    /// `ρ·2nd`: the cache size of one (layer, KV head) scaled by ρ.
    pub fn base_budget(&self) -> f64 {
        self.rho * 2.0 * self.context_len as f64 * self.head_dim as f64
    }

    /// Unrounded total over all layers for one KV head.
    pub fn target_total(&self) -> f64 {
        self.base_budget() * self.layers() as f64
    }

    pub fn multiplier(&self, layer: usize) -> f64 {
        self.groups
            .iter()
            .find(|g| (g.start..g.end).contains(&layer))
            .map(|g| g.multiplier)
            .unwrap_or(0.0)
    }
}

/// `budget(ℓ) = ⌊ρ·2nd · mult(ℓ)·L / Σ_ℓ' mult(ℓ')⌋`.
pub fn plan_capacity(rho: f64, n: usize, d: usize, layers: usize, groups: &[LayerGroup]) -> Result<CapacityPlan> {
    if !(rho.is_finite() && rho > 0.0) {
        return Err(Error::InvalidConfig(format!("rho must be positive, got {rho}")));
    }
    if n == 0 || d == 0 || layers == 0 {
        return Err(Error::InvalidConfig("context length, head dim and layer count must be positive".into()));
    }
    let mut mult = vec![None; layers];
    for g in groups {
        if g.start >= g.end || g.end > layers {
            return Err(Error::InvalidConfig(format!(
                "layer group [{}, {}) empty or outside [0, {layers})",
                g.start, g.end
            )));
        }
        if !(g.multiplier.is_finite() && g.multiplier > 0.0) {
            return Err(Error::InvalidConfig(format!("group multiplier {} must be positive", g.multiplier)));
        }
        for slot in &mut mult[g.start..g.end] {
            if slot.replace(g.multiplier).is_some() {
                return Err(Error::InvalidConfig(format!("layer groups overlap in [{}, {})", g.start, g.end)));
            }
        }
    }
    let mult: Vec<f64> = mult
        .into_iter()
        .enumerate()
        .map(|(l, m)| m.ok_or_else(|| Error::InvalidConfig(format!("layer {l} is in no group"))))
        .collect::<Result<_>>()?;
    let total: f64 = mult.iter().sum();
    let base = rho * 2.0 * n as f64 * d as f64;
    let budgets = mult
        .iter()
        .map(|m| (base * m * layers as f64 / total).floor() as usize)
        .collect();
    Ok(CapacityPlan {
        rho,
        context_len: n,
        head_dim: d,
        groups: groups.to_vec(),
        budgets,
    })
}

/// Quadrature points fitting in `budget`: `⌊budget / 2d⌋`.
pub fn quadrature_points(budget: usize, d: usize) -> Result<usize> {
    let p = budget / (2 * d);
    if p == 0 {
        return Err(Error::InvalidConfig(format!(
            "budget {budget} below one quadrature point ({} parameters)",
            2 * d
        )));
    }
    Ok(p)
}

/// Largest `w` with `count(w) ≤ budget` for a count nondecreasing in `w`.
fn largest_width(budget: usize, count: impl Fn(usize) -> usize) -> Option<usize> {
    if count(1) > budget {
        return None;
    }
    let mut hi = 2;
    while count(hi) <= budget {
        if count(hi) == count(hi / 2) {
            // Width does not enter the count (all depths zero).
            return Some(1);
        }
        hi *= 2;
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if count(mid) <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(lo)
}

/// Largest uniform width whose exact parameter count fits `budget`.
pub fn size_mlp_to_budget(budget: usize, d: usize, depths: Depths, flags: MlpFlags) -> Result<usize> {
    largest_width(budget, |w| MlpShape::uniform(d, depths, w, flags).param_count()).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "budget {budget} below the smallest module ({} parameters)",
            MlpShape::uniform(d, depths, 1, flags).param_count()
        ))
    })
}

/// Shape for one module budget. With a shared backbone a single width is
/// sized jointly; without one the score head receives `score_fraction` of
/// the budget and the target head the rest, each sized independently.
pub fn mlp_shape_for_budget(budget: usize, d: usize, depths: Depths, flags: MlpFlags, score_fraction: f64) -> Result<MlpShape> {
    if depths.backbone > 0 {
        let w = size_mlp_to_budget(budget, d, depths, flags)?;
        return Ok(MlpShape::uniform(d, depths, w, flags));
    }
    if !(score_fraction > 0.0 && score_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("score fraction {score_fraction} outside (0, 1)")));
    }
    let score_budget = (budget as f64 * score_fraction).floor() as usize;
    let target_budget = budget - score_budget;
    let shape = |ws: usize, wt: usize| MlpShape {
        head_dim: d,
        depths,
        backbone_width: 0,
        score_width: ws,
        target_width: wt,
        flags,
    };
    let too_small = |part: &str, b: usize| Error::InvalidConfig(format!("{part} budget {b} below the smallest head"));
    let ws = largest_width(score_budget, |w| shape(w, 1).score_params()).ok_or_else(|| too_small("score", score_budget))?;
    let wt = largest_width(target_budget, |w| shape(1, w).target_params()).ok_or_else(|| too_small("target", target_budget))?;
    let ws = if depths.score == 0 { 0 } else { ws };
    let wt = if depths.target == 0 { 0 } else { wt };
    Ok(shape(ws, wt))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_multipliers_give_base_budget() {
        let plan = plan_capacity(0.02, 4096, 16, 4, &multiplier_groups(4, &[1.0; 4])).unwrap();
        assert_eq!(plan.budgets, vec![2621; 4]);
    }

    #[test]
    fn grouped_total_is_preserved() {
        let groups = [
            LayerGroup { start: 0, end: 9, multiplier: 1.0 },
            LayerGroup { start: 9, end: 15, multiplier: 2.0 },
            LayerGroup { start: 15, end: 27, multiplier: 5.0 },
            LayerGroup { start: 27, end: 28, multiplier: 2.0 },
        ];
        let plan = plan_capacity(0.05, 8192, 64, 28, &groups).unwrap();
        let total: usize = plan.budgets.iter().sum();
        let target = plan.target_total();
        assert!(target - total as f64 >= 0.0 && target - (total as f64) < 28.0);
        assert!(plan.budgets[20] > plan.budgets[10] && plan.budgets[10] > plan.budgets[0]);
        assert_eq!(plan.budgets[27], plan.budgets[10]);
    }

    #[test]
    fn bad_groups_rejected() {
        let g = |s, e| LayerGroup { start: s, end: e, multiplier: 1.0 };
        assert!(plan_capacity(0.1, 64, 4, 4, &[g(0, 2), g(1, 4)]).is_err());
        assert!(plan_capacity(0.1, 64, 4, 4, &[g(0, 2)]).is_err());
        assert!(plan_capacity(0.1, 64, 4, 4, &[g(0, 0), g(0, 4)]).is_err());
        assert!(plan_capacity(0.0, 64, 4, 4, &[g(0, 4)]).is_err());
    }

    #[test]
    fn default_groups_cover_layers() {
        let g = default_groups(28);
        assert_eq!(g.len(), 4);
        assert_eq!((g[0].start, g[3].end), (0, 28));
        assert_eq!(default_groups(2).len(), 2);
    }

    #[test]
    fn width_is_maximal() {
        for depths in [Depths::new(0, 2, 3), Depths::new(2, 1, 1), Depths::new(1, 0, 2), Depths::new(3, 3, 3)] {
            for budget in [500, 2621, 13107, 40000] {
                let w = size_mlp_to_budget(budget, 16, depths, MlpFlags::default()).unwrap();
                let count = |w| MlpShape::uniform(16, depths, w, MlpFlags::default()).param_count();
                assert!(count(w) <= budget && budget < count(w + 1), "{depths:?} {budget}");
            }
        }
        assert!(size_mlp_to_budget(10, 16, Depths::new(1, 1, 1), MlpFlags::default()).is_err());
    }

    #[test]
    fn quadrature_points_round_down() {
        assert_eq!(quadrature_points(2621, 16).unwrap(), 81);
        assert_eq!(quadrature_points(256, 16).unwrap(), 8);
        assert!(quadrature_points(31, 16).is_err());
    }

    #[test]
    fn split_heads_respect_their_shares() {
        let shape = mlp_shape_for_budget(13107, 16, Depths::new(0, 2, 3), MlpFlags::default(), 0.1).unwrap();
        assert!(shape.score_params() <= 1310);
        assert!(shape.target_params() <= 13107 - 1310);
        let next = MlpShape { score_width: shape.score_width + 1, ..shape };
        assert!(next.score_params() > 1310);
        let next = MlpShape { target_width: shape.target_width + 1, ..shape };
        assert!(next.target_params() > 13107 - 1310);
    }
}
