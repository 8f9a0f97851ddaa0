//! Top-1 expert routing with the usual load-balancing auxiliary loss.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Mat, Var};
use crate::scalar::Scalar;

pub struct GateDecision {
    /// Chosen expert per token (row of the hidden state).
    pub expert: Vec<usize>,
    /// Router probabilities, n×E.
    pub probs: Var,
    /// `E · Σ_e f_e · P_e`, 1×1.
    pub balance_loss: Var,
    /// Fraction of tokens routed to each expert.
    pub fractions: Vec<f64>,
}

/// Routes each row of `hidden` (n×c) to the expert with the largest gate
/// logit under `gate` (E×c); ties go to the lower index.
///
/// The balance loss is `E · Σ_e f_e · P_e`, with `f_e` the routed fraction
/// (no gradient) and `P_e` the mean router probability of expert `e`.
pub fn switch_gate<T: Scalar>(g: &mut Graph<T>, hidden: Var, gate: Var) -> Result<GateDecision> {
    let experts = g.value(gate).rows();
    if experts == 0 {
        return Err(Error::config("switch gate needs at least one expert"));
    }
    let logits = g.matmul_nt(hidden, gate)?;
    let n = g.value(logits).rows();
    let expert: Vec<usize> = (0..n).map(|i| g.value(logits).argmax_row(i)).collect();
    let probs = g.softmax_rows(logits);

    let mut counts = vec![0usize; experts];
    for &e in &expert {
        counts[e] += 1;
    }
    let fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / n.max(1) as f64).collect();
    let f = g.constant(Mat::new(experts, 1, fractions.iter().map(|&v| T::lit(v)).collect())?);
    let mean_p = g.mean_rows(probs);
    let dot = g.matmul(mean_p, f)?;
    let balance_loss = g.scale(dot, T::lit(experts as f64));
    Ok(GateDecision {
        expert,
        probs,
        balance_loss,
        fractions,
    })
}
