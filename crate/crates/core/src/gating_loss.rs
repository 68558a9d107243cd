//! Gated mixing of direct and relation probabilities, and the training
//! objective.

use serde::{Deserialize, Serialize};

use crate::code_attention::Linear;
use crate::error::{Error, Result};
use crate::numerics::{Array, Scalar, Tape, Var};

/// `σ(FC_γ(α ⊙ c))`, one gate per row: `n×e, n×e -> n×1`.
pub fn gate_value<T: Scalar>(tape: &mut Tape<'_, T>, fc: &Linear, alpha: Var, codes: Var) -> Result<Var> {
    let prod = tape.mul(alpha, codes)?;
    let logit = fc.forward(tape, prod)?;
    tape.sigmoid(logit)
}

/// Mixed probabilities and the gates scattered to every position.
#[derive(Clone, Copy, Debug)]
pub struct Aggregated {
    /// `n×1` final probabilities.
    pub p: Var,
    /// `n×1` gates, zero at unselected positions.
    pub gamma: Var,
}

/// `p_i = (1-γ_i) p̂_i + γ_i p̃_i` at the selected positions and `p̂_i`
/// elsewhere. `p_relation` and `gamma` are aligned with `selected`.
///
/// The output at unselected positions is bitwise `p̂_i`; with `γ = 0` it
/// is bitwise `p̂` everywhere and with `γ = 1` bitwise `p̃` on the selection.
pub fn aggregate<T: Scalar>(
    tape: &mut Tape<'_, T>,
    p_direct: Var,
    p_relation: Var,
    gamma: Var,
    selected: &[usize],
) -> Result<Aggregated> {
    let n = tape.value(p_direct).rows();
    let k = selected.len();
    for v in [p_relation, gamma] {
        if tape.value(v).shape() != [k, 1] {
            return Err(Error::Shape {
                op: "aggregate",
                left: vec![k, 1],
                right: tape.value(v).shape().to_vec(),
            });
        }
    }
    let direct_sel = tape.gather_rows(p_direct, selected)?;
    let keep = tape.one_minus(gamma)?;
    let a = tape.mul(keep, direct_sel)?;
    let b = tape.mul(gamma, p_relation)?;
    let mixed = tape.add(a, b)?;
    replace_rows(tape, p_direct, mixed, selected, gamma, n)
}

/// Bypasses the gate: `p̃` on the selection, `p̂` elsewhere, gates all zero.
pub fn substitute<T: Scalar>(
    tape: &mut Tape<'_, T>,
    p_direct: Var,
    p_relation: Var,
    selected: &[usize],
) -> Result<Aggregated> {
    let n = tape.value(p_direct).rows();
    let zeros = tape.constant(Array::zeros(selected.len(), 1))?;
    replace_rows(tape, p_direct, p_relation, selected, zeros, n)
}

fn replace_rows<T: Scalar>(
    tape: &mut Tape<'_, T>,
    base: Var,
    rows: Var,
    selected: &[usize],
    gamma: Var,
    n: usize,
) -> Result<Aggregated> {
    let mut keep = Array::full(n, 1, T::one());
    for &i in selected {
        keep.data_mut()[i] = T::zero();
    }
    let keep = tape.constant(keep)?;
    let kept = tape.mul(base, keep)?;
    let placed = tape.scatter_rows(rows, selected, n)?;
    let p = tape.add(kept, placed)?;
    let gamma = tape.scatter_rows(gamma, selected, n)?;
    Ok(Aggregated { p, gamma })
}

/// Mean clamped binary cross-entropy over the evaluated codes.
pub fn loss_ce<T: Scalar>(tape: &mut Tape<'_, T>, p: Var, labels: &[T]) -> Result<Var> {
    tape.bce_mean(p, labels)
}

/// Mean gate value over all evaluated codes, unselected ones counting 0.
pub fn loss_comp<T: Scalar>(tape: &mut Tape<'_, T>, gamma: Var) -> Result<Var> {
    tape.mean_all(gamma)
}

/// Mean halved symmetric Bernoulli KL between two dropout passes.
pub fn r_drop_penalty<T: Scalar>(tape: &mut Tape<'_, T>, p1: Var, p2: Var) -> Result<Var> {
    tape.sym_bernoulli_kl(p1, p2)
}

/// Scalar values of the loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_comp: f64,
    pub l_rdrop: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(l_ce: f64, l_comp: f64, l_rdrop: f64, lambda: f64, rho: f64) -> Self {
        Self {
            l_ce,
            l_comp,
            l_rdrop,
            total: l_ce + lambda * l_comp + rho * l_rdrop,
        }
    }
}

/// `l_ce + λ l_comp + ρ l_rdrop` on the tape; `rdrop` may be absent.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    ce: Var,
    comp: Var,
    rdrop: Option<Var>,
    lambda: f64,
    rho: f64,
) -> Result<Var> {
    let weighted = tape.scale(comp, T::lit(lambda))?;
    let mut total = tape.add(ce, weighted)?;
    if let Some(r) = rdrop {
        let r = tape.scale(r, T::lit(rho))?;
        total = tape.add(total, r)?;
    }
    Ok(total)
}
