//! Per-(layer, KV head) surrogate modules predicting the context score and
//! target from a rotated query.

mod capacity;
mod mlp;
mod quadrature;
mod stack;

pub use capacity::{
    default_groups, mlp_shape_for_budget, multiplier_groups, plan_capacity, quadrature_points, size_mlp_to_budget,
    CapacityPlan, LayerGroup,
};
pub use mlp::{Depths, MlpFlags, MlpModule, MlpShape, MlpTrace};
pub use quadrature::{QuadratureModule, QuadratureTrace};
pub use stack::{init_surrogate_stack, ModuleTrace, SurrogateFamily, SurrogateModule, SurrogateStack};
