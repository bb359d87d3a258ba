//! Parameter-sharing strategies behind one model type.
//!
//! | kind          | networks | id one-hot | layers after the first | masks |
//! |---------------|----------|------------|------------------------|-------|
//! | `NoPS`        | N        | no         | dense                  | no    |
//! | `FuPS`        | 1        | no         | dense                  | no    |
//! | `FuPS_ID`     | 1        | yes        | dense                  | no    |
//! | `FuPS_ID_SVD` | 1        | yes        | spectral, `r_s = 0`    | no    |
//! | `Prism`       | 1        | no         | spectral               | yes   |
//! | `Prism_NoDiv` | 1        | no         | spectral               | yes   |
//!
//! The first (observation) layer is always dense. `Prism_NoDiv` has the same
//! parameters as `Prism`; training runs it with the diversity weight at zero.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::regularize::{diversity_loss, ortho_loss};
use crate::spectral::{SpectralFactors, SpectralNodes};

#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeKind {
    NoPS,
    FuPS,
    FuPS_ID,
    FuPS_ID_SVD,
    Prism,
    Prism_NoDiv,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 6] = [
        SchemeKind::NoPS,
        SchemeKind::FuPS,
        SchemeKind::FuPS_ID,
        SchemeKind::FuPS_ID_SVD,
        SchemeKind::Prism,
        SchemeKind::Prism_NoDiv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::NoPS => "NoPS",
            SchemeKind::FuPS => "FuPS",
            SchemeKind::FuPS_ID => "FuPS_ID",
            SchemeKind::FuPS_ID_SVD => "FuPS_ID_SVD",
            SchemeKind::Prism => "Prism",
            SchemeKind::Prism_NoDiv => "Prism_NoDiv",
        }
    }

    pub fn id_augmentation(self) -> bool {
        matches!(self, SchemeKind::FuPS_ID | SchemeKind::FuPS_ID_SVD)
    }

    pub fn is_spectral(self) -> bool {
        matches!(self, SchemeKind::FuPS_ID_SVD | SchemeKind::Prism | SchemeKind::Prism_NoDiv)
    }

    pub fn is_prism(self) -> bool {
        matches!(self, SchemeKind::Prism | SchemeKind::Prism_NoDiv)
    }

    pub fn uses_diversity(self) -> bool {
        self == SchemeKind::Prism
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme `{s}`")))
    }
}

/// Description of a sharing scheme before any parameters exist.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeConfig {
    pub kind: SchemeKind,
    /// `(in_dim, out_dim)` per layer, before id augmentation.
    pub layers: Vec<(usize, usize)>,
    pub n_agents: usize,
    /// Common ratio; only meaningful for the Prism kinds.
    pub common_ratio: Option<f64>,
}

impl SchemeConfig {
    /// Observation → hidden → hidden → actions.
    pub fn mlp(kind: SchemeKind, obs_dim: usize, hidden: usize, n_actions: usize, n_agents: usize, common_ratio: f64) -> Self {
        SchemeConfig {
            kind,
            layers: vec![(obs_dim, hidden), (hidden, hidden), (hidden, n_actions)],
            n_agents,
            common_ratio: kind.is_prism().then_some(common_ratio),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::Config("n_agents must be at least 1".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("at least one layer is required".into()));
        }
        for (i, &(a, b)) in self.layers.iter().enumerate() {
            if a == 0 || b == 0 {
                return Err(Error::Config(format!("layer {i} has a zero dimension")));
            }
            if i > 0 && self.layers[i - 1].1 != a {
                return Err(Error::Config(format!("layer {i} input {a} does not chain from {}", self.layers[i - 1].1)));
            }
        }
        match (self.kind.is_prism(), self.common_ratio) {
            (true, None) => return Err(Error::Config(format!("{} needs a common ratio", self.kind))),
            (false, Some(_)) => return Err(Error::Config(format!("{} takes no common ratio", self.kind))),
            (true, Some(rho)) if !(0.0..=1.0).contains(&rho) => {
                return Err(Error::Config(format!("common ratio {rho} outside [0, 1]")))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.layers[0].0
    }

    pub fn n_actions(&self) -> usize {
        self.layers.last().map_or(0, |l| l.1)
    }

    pub fn n_nets(&self) -> usize {
        if self.kind == SchemeKind::NoPS {
            self.n_agents
        } else {
            1
        }
    }

    fn spectral_ratio(&self) -> Option<f64> {
        match self.kind {
            SchemeKind::FuPS_ID_SVD => Some(1.0),
            SchemeKind::Prism | SchemeKind::Prism_NoDiv => self.common_ratio,
            _ => None,
        }
    }
}

/// Who a parameter record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    /// Part of network `n`; every agent mapped to that network uses it.
    Net(usize),
    /// Indexed by one agent inside a shared network.
    Agent(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub owner: Owner,
}

/// Index into [`Model::params`].
pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `weight: out x in`, `bias: 1 x out`.
    Dense { weight: ParamId, bias: ParamId },
    Spectral(SpectralParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralParams {
    pub u: ParamId,
    pub v: ParamId,
    pub s_common: ParamId,
    pub s_separate: ParamId,
    pub thresholds: Vec<ParamId>,
    pub bias: ParamId,
}

/// Parameter counts split by ownership.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub shared: usize,
    pub per_agent_overhead: usize,
}

/// A built scheme: the parameter store plus the layer wiring of every network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: SchemeConfig,
    params: Vec<Matrix>,
    info: Vec<ParamInfo>,
    nets: Vec<Vec<Layer>>,
}

fn dense_init(out: usize, input: usize, rng: &mut ChaCha8Rng) -> (Matrix, Matrix) {
    let bound = 1.0 / (input as f64).sqrt();
    (Matrix::uniform(out, input, -bound, bound, rng), Matrix::uniform(1, out, -bound, bound, rng))
}

impl Model {
    /// Creates every parameter the scheme needs, deterministically from `seed`.
    pub fn build(config: &SchemeConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model { config: config.clone(), params: Vec::new(), info: Vec::new(), nets: Vec::new() };
        let id_extra = if config.kind.id_augmentation() { config.n_agents } else { 0 };
        for net in 0..config.n_nets() {
            let mut layers = Vec::with_capacity(config.layers.len());
            for (li, &(input, out)) in config.layers.iter().enumerate() {
                let owner = Owner::Net(net);
                let spectral_ratio = if li > 0 { config.spectral_ratio() } else { None };
                let layer = match spectral_ratio {
                    None => {
                        let input = if li == 0 { input + id_extra } else { input };
                        let (w, b) = dense_init(out, input, &mut rng);
                        Layer::Dense {
                            weight: model.push(w, format!("net{net}.l{li}.weight"), owner),
                            bias: model.push(b, format!("net{net}.l{li}.bias"), owner),
                        }
                    }
                    Some(rho) => {
                        let f = SpectralFactors::init_with_rng(out, input, rho, config.n_agents, &mut rng)?;
                        let thresholds = f
                            .thresholds
                            .iter()
                            .enumerate()
                            .map(|(a, t)| model.push(Matrix::col_vector(t), format!("l{li}.t[{a}]"), Owner::Agent(a)))
                            .collect();
                        Layer::Spectral(SpectralParams {
                            u: model.push(f.u, format!("l{li}.U"), owner),
                            v: model.push(f.v, format!("l{li}.V"), owner),
                            s_common: model.push(Matrix::col_vector(&f.s_common), format!("l{li}.s_common"), owner),
                            s_separate: model.push(Matrix::col_vector(&f.s_separate), format!("l{li}.s_separate"), owner),
                            thresholds,
                            bias: model.push(Matrix::row_vector(&f.bias), format!("l{li}.bias"), owner),
                        })
                    }
                };
                layers.push(layer);
            }
            model.nets.push(layers);
        }
        Ok(model)
    }

    fn push(&mut self, m: Matrix, name: String, owner: Owner) -> ParamId {
        self.params.push(m);
        self.info.push(ParamInfo { name, owner });
        self.params.len() - 1
    }

    pub fn config(&self) -> &SchemeConfig {
        &self.config
    }

    pub fn kind(&self) -> SchemeKind {
        self.config.kind
    }

    pub fn n_agents(&self) -> usize {
        self.config.n_agents
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn nets(&self) -> &[Vec<Layer>] {
        &self.nets
    }

    /// Network used by `agent`.
    pub fn net_of(&self, agent: usize) -> Result<usize> {
        if agent >= self.config.n_agents {
            return Err(Error::UnknownAgent { agent, n_agents: self.config.n_agents });
        }
        Ok(if self.config.kind == SchemeKind::NoPS { agent } else { 0 })
    }

    /// Shared parameters and agent-indexed overhead.
    ///
    /// For `NoPS` the first network counts as shared and the other `N − 1`
    /// as overhead.
    pub fn count_parameters(&self) -> ParamCount {
        let mut count = ParamCount { shared: 0, per_agent_overhead: 0 };
        for (p, info) in self.params.iter().zip(&self.info) {
            match info.owner {
                Owner::Net(0) => count.shared += p.len(),
                Owner::Net(_) | Owner::Agent(_) => count.per_agent_overhead += p.len(),
            }
        }
        count
    }

    /// Snapshot of spectral layer `layer` of network 0 as plain factors.
    pub fn spectral_factors(&self, layer: usize) -> Option<SpectralFactors> {
        match self.nets.first()?.get(layer)? {
            Layer::Dense { .. } => None,
            Layer::Spectral(sp) => Some(SpectralFactors {
                u: self.params[sp.u].clone(),
                v: self.params[sp.v].clone(),
                s_common: self.params[sp.s_common].data().to_vec(),
                s_separate: self.params[sp.s_separate].data().to_vec(),
                thresholds: sp.thresholds.iter().map(|&t| self.params[t].data().to_vec()).collect(),
                bias: self.params[sp.bias].data().to_vec(),
            }),
        }
    }

    /// All spectral layers of network 0, in order.
    pub fn all_spectral_factors(&self) -> Vec<SpectralFactors> {
        (0..self.config.layers.len()).filter_map(|l| self.spectral_factors(l)).collect()
    }

    fn augment(&self, agent: usize, obs: &Matrix) -> Result<Matrix> {
        let obs_dim = self.config.obs_dim();
        if obs.cols() != obs_dim {
            return Err(Error::Dimension { op: "agent_forward", left: (obs.rows(), obs_dim), right: obs.shape() });
        }
        if !self.config.kind.id_augmentation() {
            return Ok(obs.clone());
        }
        let n = self.config.n_agents;
        let mut out = Matrix::zeros(obs.rows(), obs_dim + n);
        for r in 0..obs.rows() {
            for (c, v) in obs.row(r).iter().enumerate() {
                out.set(r, c, *v);
            }
            out.set(r, obs_dim + agent, 1.0);
        }
        Ok(out)
    }

    /// Q-values for a batch of observations (`batch x obs_dim`), one row per sample.
    pub fn q_values_batch(&self, agent: usize, obs: &Matrix) -> Result<Matrix> {
        let net = self.net_of(agent)?;
        let mut x = self.augment(agent, obs)?;
        let n_layers = self.nets[net].len();
        for (li, layer) in self.nets[net].iter().enumerate() {
            let mut y = match layer {
                Layer::Dense { weight, bias } => {
                    let mut y = x.matmul_nt(&self.params[*weight])?;
                    add_row(&mut y, self.params[*bias].data());
                    y
                }
                Layer::Spectral(sp) => {
                    let s = self.agent_spectrum(sp, agent)?;
                    let mut xv = x.matmul(&self.params[sp.v])?;
                    let r = s.len();
                    if r > 0 {
                        for row in xv.data_mut().chunks_mut(r) {
                            for (a, w) in row.iter_mut().zip(&s) {
                                *a *= w;
                            }
                        }
                    }
                    let mut y = xv.matmul_nt(&self.params[sp.u])?;
                    add_row(&mut y, self.params[sp.bias].data());
                    y
                }
            };
            if li + 1 < n_layers {
                y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            x = y;
        }
        Ok(x)
    }

    /// Q-values of one agent for a single observation.
    pub fn q_values(&self, agent: usize, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.q_values_batch(agent, &Matrix::row_vector(obs))?.into_data())
    }

    fn agent_spectrum(&self, sp: &SpectralParams, agent: usize) -> Result<Vec<f64>> {
        let s_sep = self.params[sp.s_separate].data();
        let mut s = self.params[sp.s_common].data().to_vec();
        if !s_sep.is_empty() {
            let max = s_sep.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == 0.0 || !max.is_finite() {
                return Err(Error::DegenerateSpectrum);
            }
            let t = self.params[sp.thresholds[agent]].data();
            // Same arithmetic as the tape path: scale by 1/max, then gate.
            let inv = 1.0 / max;
            s.extend(
                s_sep
                    .iter()
                    .zip(t)
                    .map(|(sv, tv)| sv * (sv * inv - crate::spectral::sigmoid(*tv)).max(0.0)),
            );
        }
        Ok(s)
    }

    /// Per-agent masked separate spectra `s_separate ⊙ m_i`, one vector per
    /// spectral layer with a non-empty separate part.
    pub fn masked_spectra(&self) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut per_agent = vec![Vec::new(); self.config.n_agents];
        for f in self.all_spectral_factors() {
            if f.r_separate() == 0 {
                continue;
            }
            for (agent, out) in per_agent.iter_mut().enumerate() {
                out.push(f.masked_separate(agent)?);
            }
        }
        Ok(per_agent)
    }

    /// Registers every parameter on `tape`, as leaves when `learnable`.
    pub fn register(&self, tape: &mut Tape, learnable: bool) -> Result<ModelNodes> {
        let ids: Vec<NodeId> =
            self.params.iter().map(|p| if learnable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) }).collect();
        let mut nets = Vec::with_capacity(self.nets.len());
        for layers in &self.nets {
            let mut out = Vec::with_capacity(layers.len());
            for layer in layers {
                out.push(match layer {
                    Layer::Dense { weight, bias } => LayerNodes::Dense { weight: ids[*weight], bias: ids[*bias] },
                    Layer::Spectral(sp) => {
                        let nodes = SpectralNodes {
                            u: ids[sp.u],
                            v: ids[sp.v],
                            s_common: ids[sp.s_common],
                            s_separate: ids[sp.s_separate],
                            thresholds: sp.thresholds.iter().map(|&t| ids[t]).collect(),
                            bias: ids[sp.bias],
                        };
                        let mut masks = Vec::with_capacity(self.config.n_agents);
                        let mut spectra = Vec::with_capacity(self.config.n_agents);
                        for agent in 0..self.config.n_agents {
                            let mask = nodes.mask_node(tape, agent)?;
                            let s = match mask {
                                None => nodes.s_common,
                                Some(m) => {
                                    let masked = tape.hadamard(nodes.s_separate, m)?;
                                    if tape.value(nodes.s_common).rows() == 0 {
                                        masked
                                    } else {
                                        tape.concat_rows(nodes.s_common, masked)?
                                    }
                                }
                            };
                            masks.push(mask);
                            spectra.push(s);
                        }
                        LayerNodes::Spectral { nodes, masks, spectra }
                    }
                });
            }
            nets.push(out);
        }
        Ok(ModelNodes { ids, nets, kind: self.config.kind, n_agents: self.config.n_agents, obs_dim: self.config.obs_dim() })
    }
}

fn add_row(y: &mut Matrix, bias: &[f64]) {
    let cols = y.cols();
    if cols == 0 {
        return;
    }
    for row in y.data_mut().chunks_mut(cols) {
        for (a, b) in row.iter_mut().zip(bias) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone)]
pub enum LayerNodes {
    Dense { weight: NodeId, bias: NodeId },
    Spectral { nodes: SpectralNodes, masks: Vec<Option<NodeId>>, spectra: Vec<NodeId> },
}

/// A model's parameters as tape nodes, with per-agent masks precomputed.
#[derive(Debug, Clone)]
pub struct ModelNodes {
    /// Tape node of each parameter, indexed like [`Model::params`].
    pub ids: Vec<NodeId>,
    nets: Vec<Vec<LayerNodes>>,
    kind: SchemeKind,
    n_agents: usize,
    obs_dim: usize,
}

impl ModelNodes {
    /// Records `agent`'s Q-values for `obs` (`batch x obs_dim`) on `tape`.
    pub fn q_values(&self, tape: &mut Tape, agent: usize, obs: &Matrix) -> Result<NodeId> {
        if agent >= self.n_agents {
            return Err(Error::UnknownAgent { agent, n_agents: self.n_agents });
        }
        if obs.cols() != self.obs_dim {
            return Err(Error::Dimension { op: "agent_forward", left: (obs.rows(), self.obs_dim), right: obs.shape() });
        }
        let input = if self.kind.id_augmentation() {
            let mut aug = Matrix::zeros(obs.rows(), self.obs_dim + self.n_agents);
            for r in 0..obs.rows() {
                for (c, v) in obs.row(r).iter().enumerate() {
                    aug.set(r, c, *v);
                }
                aug.set(r, self.obs_dim + agent, 1.0);
            }
            aug
        } else {
            obs.clone()
        };
        let batch = input.rows();
        let mut x = tape.constant(input);
        let ones = tape.constant(Matrix::filled(batch, 1, 1.0));
        let net = if self.kind == SchemeKind::NoPS { agent } else { 0 };
        let layers = &self.nets[net];
        for (li, layer) in layers.iter().enumerate() {
            let y = match layer {
                LayerNodes::Dense { weight, bias } => {
                    let wt = tape.transpose(*weight);
                    let xw = tape.matmul(x, wt)?;
                    let b = tape.matmul(ones, *bias)?;
                    tape.add(xw, b)?
                }
                LayerNodes::Spectral { nodes, spectra, .. } => {
                    let xv = tape.matmul(x, nodes.v)?;
                    let scaled = tape.mul_diag(xv, spectra[agent])?;
                    let ut = tape.transpose(nodes.u);
                    let y = tape.matmul(scaled, ut)?;
                    let b = tape.matmul(ones, nodes.bias)?;
                    tape.add(y, b)?
                }
            };
            x = if li + 1 < layers.len() { tape.relu(y) } else { y };
        }
        Ok(x)
    }

    /// Diversity and orthogonality terms summed over all spectral layers.
    /// Both are constant zero for schemes without spectral layers.
    pub fn regularizers(&self, tape: &mut Tape) -> Result<(NodeId, NodeId)> {
        let mut divs = Vec::new();
        let mut orthos = Vec::new();
        for layer in self.nets.iter().flatten() {
            if let LayerNodes::Spectral { nodes, masks, .. } = layer {
                orthos.push(ortho_loss(tape, nodes.u, nodes.v)?);
                let present: Vec<NodeId> = masks.iter().flatten().copied().collect();
                if !present.is_empty() {
                    divs.push(diversity_loss(tape, nodes.s_separate, &present)?);
                }
            }
        }
        Ok((tape.add_all(&divs)?, tape.add_all(&orthos)?))
    }
}
