//! Diversity and orthogonality regularizers.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Regularization weights: `beta` scales the diversity term (which is
/// maximized), `lambda_ortho` the orthogonality penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegConfig {
    pub beta: f64,
    pub lambda_ortho: f64,
}

impl RegConfig {
    pub fn new(beta: f64, lambda_ortho: f64) -> Result<Self> {
        for (name, v) in [("beta", beta), ("lambda_ortho", lambda_ortho)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(RegConfig { beta, lambda_ortho })
    }
}

/// `Σ_i Σ_{j≠i} ‖s_separate ⊙ (bin(m_i) − bin(m_j))‖₁` over ordered pairs.
///
/// `bin` is the straight-through binarizer, so gradients reach the masks
/// (and through them the thresholds) as if it were the identity.
pub fn diversity_loss(tape: &mut Tape, s_separate: NodeId, masks: &[NodeId]) -> Result<NodeId> {
    let r_s = tape.value(s_separate).shape();
    for &m in masks {
        if tape.value(m).shape() != r_s {
            return Err(Error::Dimension { op: "diversity_loss", left: r_s, right: tape.value(m).shape() });
        }
    }
    let binary: Vec<NodeId> = masks.iter().map(|&m| tape.ste_binarize(m)).collect();
    let mut terms = Vec::with_capacity(masks.len() * masks.len().saturating_sub(1));
    for (i, &bi) in binary.iter().enumerate() {
        for (j, &bj) in binary.iter().enumerate() {
            if i == j {
                continue;
            }
            let diff = tape.sub(bi, bj)?;
            let weighted = tape.hadamard(s_separate, diff)?;
            terms.push(tape.l1(weighted));
        }
    }
    tape.add_all(&terms)
}

/// `‖UᵀU − I‖_F² + ‖VᵀV − I‖_F²` for `U: d x r`, `V: k x r`.
pub fn ortho_loss(tape: &mut Tape, u: NodeId, v: NodeId) -> Result<NodeId> {
    let (ur, vr) = (tape.value(u).cols(), tape.value(v).cols());
    if ur != vr {
        return Err(Error::Dimension { op: "ortho_loss", left: tape.value(u).shape(), right: tape.value(v).shape() });
    }
    let eye = tape.constant(Matrix::identity(ur));
    let gram_penalty = |tape: &mut Tape, x: NodeId| -> Result<NodeId> {
        let xt = tape.transpose(x);
        let gram = tape.matmul(xt, x)?;
        let dev = tape.sub(gram, eye)?;
        Ok(tape.frob_sq(dev))
    };
    let pu = gram_penalty(tape, u)?;
    let pv = gram_penalty(tape, v)?;
    tape.add(pu, pv)
}

/// `Σ policy − β·J_div + λ·L_ortho`.
pub fn total_objective(
    tape: &mut Tape,
    policy_losses: &[NodeId],
    j_div: NodeId,
    l_ortho: NodeId,
    cfg: RegConfig,
) -> Result<NodeId> {
    let policy = tape.add_all(policy_losses)?;
    let div = tape.scale(j_div, -cfg.beta);
    let ortho = tape.scale(l_ortho, cfg.lambda_ortho);
    let with_div = tape.add(policy, div)?;
    tape.add(with_div, ortho)
}
