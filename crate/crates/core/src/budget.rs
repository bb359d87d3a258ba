//! Closed-form parameter accounting for per-agent specialization.
//!
//! For a shared square `d x d` layer used by `A` agents:
//!
//! * weight-space masking keeps one `d x d` mask per agent: `(A + 1)·d²`;
//! * spectral masking keeps `U`, `V`, `s` plus one length-`d` mask per agent:
//!   `2d² + d + A·d`.
//!
//! Spectral masking is cheaper exactly when `A > (d + 1)/(d − 1)`.
//! [`scaling_table`] extends the comparison to arbitrary layer lists by
//! summing over layers, with biases included in the shared backbone.

use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::numfmt::fmt_f64;
use crate::spectral::SpectrumSplit;

fn check(d: u64, agents: u64) -> Result<()> {
    if d == 0 {
        return Err(Error::Contract("layer width d must be at least 1".into()));
    }
    if agents == 0 {
        return Err(Error::Contract("agent count A must be at least 1".into()));
    }
    Ok(())
}

/// `(A + 1)·d²`.
pub fn p_weight(d: u64, agents: u64) -> Result<u64> {
    check(d, agents)?;
    Ok((agents + 1) * d * d)
}

/// `2d² + d + A·d`.
pub fn p_spectral(d: u64, agents: u64) -> Result<u64> {
    check(d, agents)?;
    Ok(2 * d * d + d + agents * d)
}

/// `d² + A·d`: one shared weight plus a per-agent mask over output nodes.
pub fn p_node(d: u64, agents: u64) -> Result<u64> {
    check(d, agents)?;
    Ok(d * d + agents * d)
}

/// Break-even agent count `(d + 1)/(d − 1)` as an exact fraction.
pub fn threshold_ratio(d: u64) -> Result<(u64, u64)> {
    if d < 2 {
        return Err(Error::Contract(format!("efficiency threshold undefined for d = {d}")));
    }
    Ok((d + 1, d - 1))
}

pub fn efficiency_threshold(d: u64) -> Result<f64> {
    let (num, den) = threshold_ratio(d)?;
    Ok(num as f64 / den as f64)
}

/// `Δ = P_weight − P_spectral = A(d² − d) − (d² + d)` and whether `Δ > 0`.
pub fn efficiency_delta(d: u64, agents: u64) -> Result<(i64, bool)> {
    threshold_ratio(d)?;
    check(d, agents)?;
    let (d, a) = (d as i64, agents as i64);
    let delta = a * (d * d - d) - (d * d + d);
    Ok((delta, delta > 0))
}

/// Side-by-side counts for one square layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetReport {
    pub d: u64,
    pub agents: u64,
    pub p_weight: u64,
    pub p_spectral: u64,
    pub p_node: u64,
    pub delta: i64,
    pub threshold: f64,
    /// `(scheme, overhead / (shared + overhead))`.
    pub normalized_overhead: Vec<(MaskScheme, f64)>,
}

pub fn budget_report(d: u64, agents: u64) -> Result<BudgetReport> {
    let (delta, _) = efficiency_delta(d, agents)?;
    let shared_dense = d * d;
    let shared_spectral = 2 * d * d + d;
    let frac = |shared: u64, over: u64| over as f64 / (shared + over) as f64;
    Ok(BudgetReport {
        d,
        agents,
        p_weight: p_weight(d, agents)?,
        p_spectral: p_spectral(d, agents)?,
        p_node: p_node(d, agents)?,
        delta,
        threshold: efficiency_threshold(d)?,
        normalized_overhead: vec![
            (MaskScheme::FuPsId, 0.0),
            (MaskScheme::NodeMask, frac(shared_dense, agents * d)),
            (MaskScheme::EdgeMask, frac(shared_dense, agents * d * d)),
            (MaskScheme::Spectral, frac(shared_spectral, agents * d)),
        ],
    })
}

/// Per-agent specialization mechanisms compared in the scaling table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskScheme {
    FuPsId,
    NodeMask,
    EdgeMask,
    Spectral,
}

impl MaskScheme {
    pub const ALL: [MaskScheme; 4] = [MaskScheme::FuPsId, MaskScheme::NodeMask, MaskScheme::EdgeMask, MaskScheme::Spectral];
}

impl fmt::Display for MaskScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskScheme::FuPsId => "FuPS_ID",
            MaskScheme::NodeMask => "node_mask",
            MaskScheme::EdgeMask => "edge_mask",
            MaskScheme::Spectral => "spectral",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub agents: u64,
    pub scheme: MaskScheme,
    /// Shared backbone parameters.
    pub params: u64,
    /// Agent-indexed parameters.
    pub overhead: u64,
    pub normalized_overhead: f64,
}

/// Overhead of each mechanism on the layer list `arch` (`(in, out)` pairs)
/// for every agent count in `agent_counts`.
pub fn scaling_table(arch: &[(usize, usize)], common_ratio: f64, agent_counts: &[u64]) -> Result<Vec<ScalingRow>> {
    if arch.is_empty() || arch.iter().any(|&(i, o)| i == 0 || o == 0) {
        return Err(Error::Contract("architecture needs at least one layer with positive dims".into()));
    }
    if agent_counts.iter().any(|&a| a == 0) {
        return Err(Error::Contract("agent counts must be positive".into()));
    }
    if agent_counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract("agent counts must be strictly ascending".into()));
    }
    let mut dense = 0u64;
    let mut spectral = 0u64;
    let mut nodes = 0u64;
    let mut edges = 0u64;
    let mut mask_dims = 0u64;
    for &(i, o) in arch {
        let (i64_, o64) = (i as u64, o as u64);
        let r = i.min(o);
        let split = SpectrumSplit::new(common_ratio, r)?;
        dense += i64_ * o64 + o64;
        spectral += (i64_ + o64) * r as u64 + r as u64 + o64;
        nodes += o64;
        edges += i64_ * o64;
        mask_dims += split.r_separate as u64;
    }
    let mut rows = Vec::with_capacity(agent_counts.len() * 4);
    for &a in agent_counts {
        for scheme in MaskScheme::ALL {
            let (params, overhead) = match scheme {
                MaskScheme::FuPsId => (dense, 0),
                MaskScheme::NodeMask => (dense, a * nodes),
                MaskScheme::EdgeMask => (dense, a * edges),
                MaskScheme::Spectral => (spectral, a * mask_dims),
            };
            let normalized_overhead = overhead as f64 / (params + overhead) as f64;
            rows.push(ScalingRow { agents: a, scheme, params, overhead, normalized_overhead });
        }
    }
    Ok(rows)
}

pub const SCALING_HEADER: &str = "agents,scheme,params,overhead,normalized_overhead";

pub fn write_scaling_csv<W: Write>(rows: &[ScalingRow], mut out: W) -> Result<()> {
    writeln!(out, "{SCALING_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.agents, r.scheme, r.params, r.overhead, fmt_f64(r.normalized_overhead))?;
    }
    Ok(())
}
