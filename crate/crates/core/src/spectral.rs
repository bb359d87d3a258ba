//! SVD-parameterized shared layers with per-agent spectral masks.
//!
//! A layer stores `W = U diag(s) Vᵀ` with `U: d x r`, `V: k x r` and
//! `r = min(d, k)`. The spectrum is split into a common prefix shared by all
//! agents and a separate suffix that each agent gates with its own mask
//!
//! ```text
//! s_norm = s_separate / max(s_separate)
//! m_i    = relu(s_norm - sigmoid(t_i))
//! s_i    = concat(s_common, s_separate ⊙ m_i)
//! ```
//!
//! Plain-value functions here serve evaluation and analysis; the `*_node`
//! variants record the same computation on a [`Tape`] for training.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::numfmt::{fmt_f64, parse_f64};

/// How the `r` singular values divide into common and separate parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumSplit {
    pub common_ratio: f64,
    pub r_common: usize,
    pub r_separate: usize,
}

impl SpectrumSplit {
    /// `r_c = floor(ρ·r)`, `r_s = r − r_c`.
    pub fn new(common_ratio: f64, r: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&common_ratio) {
            return Err(Error::Config(format!("common ratio {common_ratio} outside [0, 1]")));
        }
        let r_common = ((common_ratio * r as f64).floor() as usize).min(r);
        Ok(SpectrumSplit { common_ratio, r_common, r_separate: r - r_common })
    }

    pub fn rank(&self) -> usize {
        self.r_common + self.r_separate
    }
}

/// Shared factors of one spectral layer plus every agent's thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFactors {
    /// `d x r`, left singular vectors.
    pub u: Matrix,
    /// `k x r`, right singular vectors.
    pub v: Matrix,
    pub s_common: Vec<f64>,
    pub s_separate: Vec<f64>,
    /// One length-`r_s` threshold vector per agent.
    pub thresholds: Vec<Vec<f64>>,
    /// Shared bias of length `d`.
    pub bias: Vec<f64>,
}

impl SpectralFactors {
    /// Orthonormal `U`, `V` from the QR of Gaussian matrices, `s ~ U[0.5, 1.5]`,
    /// thresholds at zero and bias at zero.
    pub fn init(out_dim: usize, in_dim: usize, common_ratio: f64, n_agents: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(out_dim, in_dim, common_ratio, n_agents, &mut rng)
    }

    pub fn init_with_rng(
        out_dim: usize,
        in_dim: usize,
        common_ratio: f64,
        n_agents: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::Config(format!("layer dims must be positive, got {out_dim}x{in_dim}")));
        }
        if n_agents == 0 {
            return Err(Error::Config("need at least one agent".into()));
        }
        let r = out_dim.min(in_dim);
        let split = SpectrumSplit::new(common_ratio, r)?;
        let u = Matrix::random_orthonormal(out_dim, r, rng)?;
        let v = Matrix::random_orthonormal(in_dim, r, rng)?;
        let s = Matrix::uniform(r, 1, 0.5, 1.5, rng).into_data();
        Ok(SpectralFactors {
            u,
            v,
            s_common: s[..split.r_common].to_vec(),
            s_separate: s[split.r_common..].to_vec(),
            thresholds: vec![vec![0.0; split.r_separate]; n_agents],
            bias: vec![0.0; out_dim],
        })
    }

    pub fn out_dim(&self) -> usize {
        self.u.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.v.rows()
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn r_common(&self) -> usize {
        self.s_common.len()
    }

    pub fn r_separate(&self) -> usize {
        self.s_separate.len()
    }

    pub fn n_agents(&self) -> usize {
        self.thresholds.len()
    }

    /// Concatenated spectrum `[s_common, s_separate]`.
    pub fn spectrum(&self) -> Vec<f64> {
        let mut s = self.s_common.clone();
        s.extend_from_slice(&self.s_separate);
        s
    }

    fn check_agent(&self, agent: usize) -> Result<()> {
        if agent >= self.n_agents() {
            return Err(Error::UnknownAgent { agent, n_agents: self.n_agents() });
        }
        Ok(())
    }

    /// Agent `i`'s continuous mask over the separate spectrum.
    pub fn mask(&self, agent: usize) -> Result<Vec<f64>> {
        self.check_agent(agent)?;
        if self.s_separate.is_empty() {
            return Ok(Vec::new());
        }
        let s_norm = normalize_spectrum(&self.s_separate)?;
        compute_mask(&s_norm, &self.thresholds[agent])
    }

    /// `s_separate ⊙ m_i`.
    pub fn masked_separate(&self, agent: usize) -> Result<Vec<f64>> {
        let m = self.mask(agent)?;
        Ok(self.s_separate.iter().zip(&m).map(|(s, m)| s * m).collect())
    }

    /// `s_i = concat(s_common, s_separate ⊙ m_i)`.
    pub fn agent_spectrum(&self, agent: usize) -> Result<Vec<f64>> {
        let mut s = self.s_common.clone();
        s.extend(self.masked_separate(agent)?);
        Ok(s)
    }

    /// `W_i = U diag(s_i) Vᵀ` as a `d x k` matrix.
    pub fn materialize_weight(&self, agent: usize) -> Result<Matrix> {
        let s = self.agent_spectrum(agent)?;
        let mut us = self.u.clone();
        let r = self.rank();
        if r > 0 {
            for row in us.data_mut().chunks_mut(r) {
                for (x, w) in row.iter_mut().zip(&s) {
                    *x *= w;
                }
            }
        }
        us.matmul_nt(&self.v)
    }

    /// `y = U (s_i ⊙ Vᵀx) + bias` without forming `W_i`.
    pub fn forward(&self, agent: usize, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::Dimension { op: "spectral forward", left: (self.in_dim(), 1), right: (x.len(), 1) });
        }
        let s = self.agent_spectrum(agent)?;
        let vt_x = self.v.matmul_tn(&Matrix::col_vector(x))?;
        let scaled: Vec<f64> = vt_x.data().iter().zip(&s).map(|(a, b)| a * b).collect();
        let y = self.u.matmul(&Matrix::col_vector(&scaled))?;
        Ok(y.data().iter().zip(&self.bias).map(|(a, b)| a + b).collect())
    }

    /// Number of learnable scalars shared by all agents (`U`, `V`, `s`, bias).
    pub fn shared_param_count(&self) -> usize {
        self.u.len() + self.v.len() + self.s_common.len() + self.s_separate.len() + self.bias.len()
    }

    /// Number of agent-indexed scalars (thresholds).
    pub fn per_agent_param_count(&self) -> usize {
        self.thresholds.iter().map(Vec::len).sum()
    }

    /// Serializes to the checkpoint text format.
    ///
    /// Every float is written with 17 significant digits so that parsing
    /// the document back reproduces the factors bit for bit.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "d = {}", self.out_dim());
        let _ = writeln!(out, "k = {}", self.in_dim());
        let _ = writeln!(out, "r_c = {}", self.r_common());
        let _ = writeln!(out, "r_s = {}", self.r_separate());
        let _ = writeln!(out, "N = {}", self.n_agents());
        write_array(&mut out, "U", self.u.data());
        write_array(&mut out, "V", self.v.data());
        write_array(&mut out, "s_common", &self.s_common);
        write_array(&mut out, "s_separate", &self.s_separate);
        for (i, t) in self.thresholds.iter().enumerate() {
            write_array(&mut out, &format!("t[{i}]"), t);
        }
        write_array(&mut out, "bias", &self.bias);
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut entries = std::collections::HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: lineno + 1, msg: "expected `key = value`".into() })?;
            entries.insert(key.trim().to_string(), (lineno + 1, value.trim().to_string()));
        }
        let int = |key: &str| -> Result<usize> {
            let (line, v) = entries.get(key).ok_or_else(|| Error::Parse { line: 0, msg: format!("missing key {key}") })?;
            v.parse().map_err(|_| Error::Parse { line: *line, msg: format!("bad integer for {key}") })
        };
        let floats = |key: &str, expect: usize| -> Result<Vec<f64>> {
            let (line, v) = entries.get(key).ok_or_else(|| Error::Parse { line: 0, msg: format!("missing key {key}") })?;
            let vals = v
                .split_whitespace()
                .map(|tok| parse_f64(tok).ok_or_else(|| Error::Parse { line: *line, msg: format!("bad float `{tok}`") }))
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != expect {
                return Err(Error::Parse { line: *line, msg: format!("{key} has {} values, expected {expect}", vals.len()) });
            }
            Ok(vals)
        };
        let (d, k, r_c, r_s, n) = (int("d")?, int("k")?, int("r_c")?, int("r_s")?, int("N")?);
        let r = r_c + r_s;
        if r != d.min(k) {
            return Err(Error::Parse { line: 0, msg: format!("r_c + r_s = {r} but min(d, k) = {}", d.min(k)) });
        }
        let thresholds = (0..n).map(|i| floats(&format!("t[{i}]"), r_s)).collect::<Result<Vec<_>>>()?;
        Ok(SpectralFactors {
            u: Matrix::from_vec(d, r, floats("U", d * r)?)?,
            v: Matrix::from_vec(k, r, floats("V", k * r)?)?,
            s_common: floats("s_common", r_c)?,
            s_separate: floats("s_separate", r_s)?,
            thresholds,
            bias: floats("bias", d)?,
        })
    }
}

fn write_array(out: &mut String, key: &str, values: &[f64]) {
    let _ = write!(out, "{key} =");
    for v in values {
        let _ = write!(out, " {}", fmt_f64(*v));
    }
    out.push('\n');
}

/// `s_separate / max(s_separate)`, using the raw (signed) maximum.
pub fn normalize_spectrum(s_separate: &[f64]) -> Result<Vec<f64>> {
    if s_separate.is_empty() {
        return Err(Error::Contract("cannot normalize an empty spectrum".into()));
    }
    let max = s_separate.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == 0.0 || !max.is_finite() {
        return Err(Error::DegenerateSpectrum);
    }
    Ok(s_separate.iter().map(|s| s / max).collect())
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `m = relu(s_norm − sigmoid(t))`.
pub fn compute_mask(s_norm: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if s_norm.len() != thresholds.len() {
        return Err(Error::Dimension { op: "compute_mask", left: (s_norm.len(), 1), right: (thresholds.len(), 1) });
    }
    Ok(s_norm.iter().zip(thresholds).map(|(s, t)| (s - sigmoid(*t)).max(0.0)).collect())
}

/// Coefficients of `W` on the rank-one bases `B_j = u_j v_jᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionCoefficients {
    pub alpha: Vec<f64>,
}

/// `α_j = ⟨W, u_j v_jᵀ⟩_F / ‖u_j v_jᵀ‖_F²`.
pub fn spectral_project(w: &Matrix, u: &Matrix, v: &Matrix) -> Result<ProjectionCoefficients> {
    if u.cols() != v.cols() || w.rows() != u.rows() || w.cols() != v.rows() {
        return Err(Error::Dimension { op: "spectral_project", left: w.shape(), right: (u.rows(), v.rows()) });
    }
    let mut alpha = Vec::with_capacity(u.cols());
    for j in 0..u.cols() {
        let (uj, vj) = (u.column(j), v.column(j));
        // ‖u vᵀ‖_F² = ‖u‖² ‖v‖² and ⟨W, u vᵀ⟩_F = uᵀ W v.
        let norm_sq = dot(&uj, &uj) * dot(&vj, &vj);
        if norm_sq == 0.0 {
            return Err(Error::DegenerateBasis(j));
        }
        let wv = w.matmul(&Matrix::col_vector(&vj))?;
        alpha.push(dot(&uj, wv.data()) / norm_sq);
    }
    Ok(ProjectionCoefficients { alpha })
}

/// Tape handles for one spectral layer's parameters.
#[derive(Debug, Clone)]
pub struct SpectralNodes {
    pub u: NodeId,
    pub v: NodeId,
    pub s_common: NodeId,
    pub s_separate: NodeId,
    pub thresholds: Vec<NodeId>,
    pub bias: NodeId,
}

impl SpectralNodes {
    /// Registers the layer's parameters as tape leaves (or constants).
    pub fn register(tape: &mut Tape, f: &SpectralFactors, learnable: bool) -> Self {
        let mut put = |m: Matrix| if learnable { tape.leaf(m) } else { tape.constant(m) };
        SpectralNodes {
            u: put(f.u.clone()),
            v: put(f.v.clone()),
            s_common: put(Matrix::col_vector(&f.s_common)),
            s_separate: put(Matrix::col_vector(&f.s_separate)),
            thresholds: f.thresholds.iter().map(|t| put(Matrix::col_vector(t))).collect(),
            bias: put(Matrix::row_vector(&f.bias)),
        }
    }

    pub fn r_separate(&self, tape: &Tape) -> usize {
        tape.value(self.s_separate).rows()
    }

    /// Mask node for `agent`; `None` when there is no separate spectrum.
    ///
    /// The normalizing maximum is read off the forward value and enters the
    /// graph as a constant.
    pub fn mask_node(&self, tape: &mut Tape, agent: usize) -> Result<Option<NodeId>> {
        let &t = self
            .thresholds
            .get(agent)
            .ok_or(Error::UnknownAgent { agent, n_agents: self.thresholds.len() })?;
        if self.r_separate(tape) == 0 {
            return Ok(None);
        }
        let max = tape.value(self.s_separate).data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == 0.0 || !max.is_finite() {
            return Err(Error::DegenerateSpectrum);
        }
        let s_norm = tape.scale(self.s_separate, 1.0 / max);
        let gate = tape.sigmoid(t);
        let diff = tape.sub(s_norm, gate)?;
        Ok(Some(tape.relu(diff)))
    }

    /// `s_i` as a column node.
    pub fn agent_spectrum_node(&self, tape: &mut Tape, agent: usize) -> Result<NodeId> {
        match self.mask_node(tape, agent)? {
            None => Ok(self.s_common),
            Some(m) => {
                let masked = tape.hadamard(self.s_separate, m)?;
                if tape.value(self.s_common).rows() == 0 {
                    Ok(masked)
                } else {
                    tape.concat_rows(self.s_common, masked)
                }
            }
        }
    }

    /// Batched layer output `X V diag(s_i) Uᵀ + 1 biasᵀ` for `X: batch x k`.
    pub fn forward_node(&self, tape: &mut Tape, agent: usize, x: NodeId, ones: NodeId) -> Result<NodeId> {
        let s = self.agent_spectrum_node(tape, agent)?;
        let xv = tape.matmul(x, self.v)?;
        let scaled = tape.mul_diag(xv, s)?;
        let ut = tape.transpose(self.u);
        let y = tape.matmul(scaled, ut)?;
        let b = tape.matmul(ones, self.bias)?;
        tape.add(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn identity_factors(s: &[f64]) -> SpectralFactors {
        let n = s.len();
        SpectralFactors {
            u: Matrix::identity(n),
            v: Matrix::identity(n),
            s_common: s.to_vec(),
            s_separate: vec![],
            thresholds: vec![vec![]; 2],
            bias: vec![0.0; n],
        }
    }

    #[test]
    fn split_arithmetic() {
        let f = SpectralFactors::init(4, 4, 0.5, 3, 1).unwrap();
        assert_eq!((f.rank(), f.r_common(), f.r_separate()), (4, 2, 2));
        let f = SpectralFactors::init(4, 4, 0.0, 3, 1).unwrap();
        assert_eq!((f.r_common(), f.r_separate()), (0, 4));
        let split = SpectrumSplit::new(0.6, 5).unwrap();
        assert_eq!((split.r_common, split.r_separate), (3, 2));
        assert!(SpectrumSplit::new(1.5, 4).is_err());
    }

    #[test]
    fn init_is_orthonormal_and_deterministic() {
        let a = SpectralFactors::init(7, 5, 0.5, 3, 42).unwrap();
        let b = SpectralFactors::init(7, 5, 0.5, 3, 42).unwrap();
        assert_eq!(a, b);
        let r = a.rank();
        assert!(a.u.matmul_tn(&a.u).unwrap().sub(&Matrix::identity(r)).unwrap().frob_norm() < 1e-8);
        assert!(a.v.matmul_tn(&a.v).unwrap().sub(&Matrix::identity(r)).unwrap().frob_norm() < 1e-8);
        assert!(a.spectrum().iter().all(|s| (0.5..1.5).contains(s)));
        assert!(a.thresholds.iter().all(|t| t.iter().all(|&x| x == 0.0)));
        assert_eq!(a.thresholds.len(), 3);
        assert_ne!(a, SpectralFactors::init(7, 5, 0.5, 3, 43).unwrap());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_spectrum(&[2.0, 4.0]).unwrap(), vec![0.5, 1.0]);
        assert_eq!(normalize_spectrum(&[3.7]).unwrap(), vec![1.0]);
        assert_eq!(normalize_spectrum(&[-1.0, 2.0]).unwrap(), vec![-0.5, 1.0]);
        assert_eq!(normalize_spectrum(&[0.0, 0.0]), Err(Error::DegenerateSpectrum));
    }

    #[test]
    fn mask_examples() {
        assert_eq!(compute_mask(&[1.0, 0.5], &[0.0, 0.0]).unwrap(), vec![0.5, 0.0]);
        assert_eq!(compute_mask(&[1.0, 0.3], &[60.0, 60.0]).unwrap(), vec![0.0, 0.0]);
        let m = compute_mask(&[0.9, 0.2, -0.1], &[-800.0; 3]).unwrap();
        assert_eq!(m, vec![0.9, 0.2, 0.0]);
        assert!(matches!(compute_mask(&[1.0], &[0.0, 0.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn agent_spectrum_examples() {
        // ρ = 1 → every agent sees the full spectrum.
        let f = SpectralFactors::init(3, 3, 1.0, 2, 5).unwrap();
        assert_eq!(f.agent_spectrum(0).unwrap(), f.spectrum());
        assert_eq!(f.agent_spectrum(1).unwrap(), f.spectrum());

        // s_common=[1], s_separate=[2], m=[0.5]: relu(1 − sigmoid(t)) = 0.5 at t = 0.
        let f = SpectralFactors {
            u: Matrix::identity(2),
            v: Matrix::identity(2),
            s_common: vec![1.0],
            s_separate: vec![2.0],
            thresholds: vec![vec![0.0], vec![0.0]],
            bias: vec![0.0; 2],
        };
        assert_eq!(f.agent_spectrum(0).unwrap(), vec![1.0, 1.0]);
        assert_eq!(f.agent_spectrum(0).unwrap(), f.agent_spectrum(1).unwrap());
        assert_eq!(f.agent_spectrum(2), Err(Error::UnknownAgent { agent: 2, n_agents: 2 }));
    }

    #[test]
    fn materialize_and_forward_with_identity_factors() {
        let f = identity_factors(&[2.0, 3.0]);
        assert_eq!(f.materialize_weight(0).unwrap(), Matrix::diag(&[2.0, 3.0]));
        assert_eq!(f.forward(0, &[1.0, 0.0]).unwrap(), vec![2.0, 0.0]);
        let z = identity_factors(&[0.0, 0.0]);
        assert_eq!(z.materialize_weight(0).unwrap(), Matrix::zeros(2, 2));
        let mut b = identity_factors(&[2.0, 3.0]);
        b.bias = vec![0.25, -1.0];
        assert_eq!(b.forward(1, &[0.0, 0.0]).unwrap(), vec![0.25, -1.0]);
        assert!(matches!(b.forward(0, &[1.0]), Err(Error::Dimension { .. })));
    }

    fn random_factors(rng: &mut ChaCha8Rng) -> SpectralFactors {
        let d = rng.random_range(1..9);
        let k = rng.random_range(1..9);
        let rho = [0.0, 0.25, 0.5, 1.0][rng.random_range(0..4)];
        let n = rng.random_range(1..4);
        let mut f = SpectralFactors::init_with_rng(d, k, rho, n, rng).unwrap();
        for t in &mut f.thresholds {
            for x in t.iter_mut() {
                *x = rng.random_range(-2.0..2.0);
            }
        }
        f.bias = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        f
    }

    #[test]
    fn forward_matches_materialized_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let f = random_factors(&mut rng);
            let x: Vec<f64> = (0..f.in_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            for agent in 0..f.n_agents() {
                let w = f.materialize_weight(agent).unwrap();
                let wx = w.matmul(&Matrix::col_vector(&x)).unwrap();
                let direct: Vec<f64> = wx.data().iter().zip(&f.bias).map(|(a, b)| a + b).collect();
                let factored = f.forward(agent, &x).unwrap();
                for (a, b) in direct.iter().zip(&factored) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let u = Matrix::random_orthonormal(5, 3, &mut rng).unwrap();
        let v = Matrix::random_orthonormal(4, 3, &mut rng).unwrap();
        let w = Matrix::outer(&u.column(0), &v.column(0)).scale(3.0);
        let a = spectral_project(&w, &u, &v).unwrap().alpha;
        assert!((a[0] - 3.0).abs() < 1e-12 && a[1].abs() < 1e-12 && a[2].abs() < 1e-12);

        let s = [1.25, 0.5, 2.0];
        let mut us = u.clone();
        for r in 0..5 {
            for c in 0..3 {
                us.set(r, c, u.get(r, c) * s[c]);
            }
        }
        let w = us.matmul_nt(&v).unwrap();
        let a = spectral_project(&w, &u, &v).unwrap().alpha;
        for (x, y) in a.iter().zip(&s) {
            assert!((x - y).abs() < 1e-10);
        }

        // A weight living in the orthogonal complement of span(U) projects to zero.
        let full = Matrix::random_orthonormal(5, 5, &mut rng).unwrap();
        let u2 = Matrix::from_vec(5, 2, (0..5).flat_map(|r| vec![full.get(r, 0), full.get(r, 1)]).collect()).unwrap();
        let v2 = Matrix::random_orthonormal(4, 2, &mut rng).unwrap();
        let w = Matrix::outer(&full.column(3), &v2.column(1));
        let a = spectral_project(&w, &u2, &v2).unwrap().alpha;
        assert!(a.iter().all(|x| x.abs() < 1e-12));

        let zero_u = Matrix::zeros(5, 3);
        assert_eq!(spectral_project(&w.matmul(&Matrix::zeros(4, 4)).unwrap(), &zero_u, &v), Err(Error::DegenerateBasis(0)));
    }

    #[test]
    fn projection_round_trip_recovers_agent_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let f = random_factors(&mut rng);
            for agent in 0..f.n_agents() {
                let w = f.materialize_weight(agent).unwrap();
                let alpha = spectral_project(&w, &f.u, &f.v).unwrap().alpha;
                let s = f.agent_spectrum(agent).unwrap();
                for (a, b) in alpha.iter().zip(&s) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let f = random_factors(&mut rng);
            let text = f.to_checkpoint();
            assert_eq!(SpectralFactors::from_checkpoint(&text).unwrap(), f);
        }
        assert!(SpectralFactors::from_checkpoint("d = 2\nk = 2\n").is_err());
    }

    #[test]
    fn tape_path_agrees_with_plain_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..30 {
            let f = random_factors(&mut rng);
            let batch = 3;
            let x = Matrix::uniform(batch, f.in_dim(), -1.0, 1.0, &mut rng);
            let mut tape = Tape::new();
            let nodes = SpectralNodes::register(&mut tape, &f, true);
            let xn = tape.constant(x.clone());
            let ones = tape.constant(Matrix::filled(batch, 1, 1.0));
            for agent in 0..f.n_agents() {
                let s = nodes.agent_spectrum_node(&mut tape, agent).unwrap();
                for (a, b) in tape.value(s).data().iter().zip(&f.agent_spectrum(agent).unwrap()) {
                    assert!((a - b).abs() < 1e-14);
                }
                let y = nodes.forward_node(&mut tape, agent, xn, ones).unwrap();
                for b in 0..batch {
                    let plain = f.forward(agent, x.row(b)).unwrap();
                    for (p, q) in plain.iter().zip(tape.value(y).row(b)) {
                        assert!((p - q).abs() < 1e-12);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn distinct_rank_one_bases_are_orthogonal(seed in any::<u64>(), d in 1usize..9, k in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = d.min(k);
            let u = Matrix::random_orthonormal(d, r, &mut rng).unwrap();
            let v = Matrix::random_orthonormal(k, r, &mut rng).unwrap();
            for p in 0..r {
                for q in 0..r {
                    if p != q {
                        let bp = Matrix::outer(&u.column(p), &v.column(p));
                        let bq = Matrix::outer(&u.column(q), &v.column(q));
                        prop_assert!(bp.frob_inner(&bq).unwrap().abs() < 1e-10);
                    }
                }
            }
        }

        #[test]
        fn common_prefix_is_identical_across_agents(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_factors(&mut rng);
            let rc = f.r_common();
            let first = f.agent_spectrum(0).unwrap();
            for agent in 1..f.n_agents() {
                let other = f.agent_spectrum(agent).unwrap();
                for j in 0..rc {
                    prop_assert_eq!(first[j].to_bits(), other[j].to_bits());
                }
            }
        }

        #[test]
        fn raising_a_threshold_never_raises_its_mask(
            s in proptest::collection::vec(0.05f64..2.0, 1..8),
            t in proptest::collection::vec(-3.0f64..3.0, 8),
            idx in 0usize..8,
            bump in 0.0f64..4.0,
        ) {
            let t = &t[..s.len()];
            let idx = idx % s.len();
            let s_norm = normalize_spectrum(&s).unwrap();
            let base = compute_mask(&s_norm, t).unwrap();
            let mut raised = t.to_vec();
            raised[idx] += bump;
            let after = compute_mask(&s_norm, &raised).unwrap();
            prop_assert!(after[idx] <= base[idx]);
            prop_assert!(after.iter().all(|m| *m >= 0.0));
        }
    }
}
