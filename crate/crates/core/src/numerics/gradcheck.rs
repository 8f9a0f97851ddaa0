//! Central-difference verification of backward passes.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::matrix::Mat;
use crate::scalar::Scalar;

/// Floor on the denominator of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Worst disagreement found by [`grad_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat entry index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
}

/// Compares backward-pass gradients with central differences over every entry
/// of every parameter. `build` receives a fresh graph plus one leaf per
/// parameter and must return a 1×1 loss node.
pub fn grad_check<T, F>(params: &mut [Mat<T>], eps: f64, build: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let all = vec![true; params.len()];
    grad_check_subset(params, &all, eps, build)
}

/// As [`grad_check`], restricted to parameters whose `selected` flag is set.
/// Unselected parameters still take part in the loss.
pub fn grad_check_subset<T, F>(
    params: &mut [Mat<T>],
    selected: &[bool],
    eps: f64,
    mut build: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::config(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }
    if selected.len() != params.len() {
        return Err(Error::config(
            "grad_check selection length differs from parameter count",
        ));
    }

    let analytic = {
        let mut g = Graph::new();
        let leaves: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = build(&mut g, &leaves)?;
        check_loss(g.scalar(loss).to_f64_lossy())?;
        g.backward(loss);
        leaves.iter().map(|&v| g.grad(v)).collect::<Vec<_>>()
    };

    let mut eval = |params: &[Mat<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
        let loss = build(&mut g, &leaves)?;
        check_loss(g.scalar(loss).to_f64_lossy())
    };

    let h = T::lit(eps);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for pi in 0..params.len() {
        if !selected[pi] {
            continue;
        }
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            params[pi].data_mut()[k] = orig + h;
            let plus = eval(params);
            params[pi].data_mut()[k] = orig - h;
            let minus = eval(params);
            params[pi].data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let exact = analytic[pi].data()[k].to_f64_lossy();
            let denom = exact.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            let rel = (exact - numeric).abs() / denom;
            report.entries_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, k));
            }
        }
    }
    Ok(report)
}

fn check_loss(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("loss evaluated to {v}")))
    }
}
