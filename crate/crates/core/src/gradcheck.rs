//! Central finite-difference checks of analytic gradients.

use crate::surrogate::SurrogateStack;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error, so components whose gradient
/// is near zero are judged on absolute error instead.
pub const FD_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, FD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= FD_TOLERANCE
    }
}

/// Central difference of `f` at every coordinate of `x`.
pub fn central_difference(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn check_vector(name: &str, x: &[f64], analytic: &[f64], f: impl FnMut(&[f64]) -> f64) -> GradCheck {
    let numeric = central_difference(x, f);
    GradCheck {
        name: name.into(),
        checked: x.len(),
        max_rel_err: analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max),
    }
}

/// Checks `analytic` (one vector per module) against central differences
/// of `loss` over every parameter of `stack`, reported per named parameter
/// group of each module.
pub fn check_stack(stack: &SurrogateStack, analytic: &[Vec<f64>], mut loss: impl FnMut(&SurrogateStack) -> f64) -> Vec<GradCheck> {
    let mut probe = stack.clone();
    let mut out = Vec::new();
    for (m, module) in stack.modules().iter().enumerate() {
        for (group, range) in module.param_groups() {
            let mut worst: f64 = 0.0;
            for i in range.clone() {
                let x = module.params()[i];
                probe.modules_mut()[m].params_mut()[i] = x + FD_STEP;
                let up = loss(&probe);
                probe.modules_mut()[m].params_mut()[i] = x - FD_STEP;
                let down = loss(&probe);
                probe.modules_mut()[m].params_mut()[i] = x;
                worst = worst.max(relative_error(analytic[m][i], (up - down) / (2.0 * FD_STEP)));
            }
            out.push(GradCheck {
                name: format!("module{m}.{group}"),
                checked: range.len(),
                max_rel_err: worst,
            });
        }
    }
    out
}
