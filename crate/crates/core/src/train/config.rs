//! Training settings and the flat `key = value` config format.
//!
//! ```text
//! # split-control, Prism
//! env.kind = splitcontrol
//! env.n_agents = 2
//! scheme.kind = Prism
//! train.total_steps = 50000
//! train.seeds = 0, 1, 2, 3, 4
//! ```
//!
//! Blank lines and `#` comments are ignored. Unset keys take the defaults of
//! the chosen `env.kind`.

use std::collections::BTreeMap;
use std::str::FromStr;

use super::optim::OptimizerKind;
use crate::envs::{EnvConfig, EnvKind};
use crate::error::{Error, Result};
use crate::schemes::{SchemeConfig, SchemeKind};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Hard target sync period, in environment steps.
    pub target_update_interval: usize,
    pub epsilon_start: f64,
    pub epsilon_finish: f64,
    pub epsilon_anneal_steps: usize,
    pub beta: f64,
    pub lambda_ortho: f64,
    pub rho: f64,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Environment steps between gradient steps.
    pub train_interval: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
    pub optimizer: OptimizerKind,
    /// One exploration draw for the whole team, replicated to every agent.
    pub mirror_exploration: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            gamma: 0.99,
            batch_size: 32,
            buffer_capacity: 5000,
            target_update_interval: 200,
            epsilon_start: 1.0,
            epsilon_finish: 0.05,
            epsilon_anneal_steps: 50_000,
            beta: 5.0,
            lambda_ortho: 0.01,
            rho: 0.5,
            total_steps: 50_000,
            eval_interval: 1000,
            eval_episodes: 10,
            train_interval: 1,
            seed: 0,
            clip: Some(10.0),
            optimizer: OptimizerKind::Adam,
            mirror_exploration: false,
        }
    }
}

impl TrainConfig {
    /// Defaults adjusted per environment: foraging bootstraps over a sparse
    /// reward summed across agents and diverges at `γ = 0.99`; split-control
    /// uses the lighter diversity weight.
    pub fn for_env(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Foraging => TrainConfig { gamma: 0.9, ..TrainConfig::default() },
            EnvKind::SplitControl => TrainConfig { beta: 0.1, ..TrainConfig::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("train.lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("train.gamma must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("train.batch_size and train.buffer_capacity must be positive");
        }
        if self.batch_size > self.buffer_capacity {
            return bad("train.batch_size exceeds train.buffer_capacity");
        }
        if self.target_update_interval == 0 || self.eval_interval == 0 || self.train_interval == 0 {
            return bad("intervals must be positive");
        }
        if self.eval_episodes == 0 {
            return bad("train.eval_episodes must be positive");
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.epsilon_start) || !unit.contains(&self.epsilon_finish) {
            return bad("epsilon values must lie in [0, 1]");
        }
        if self.epsilon_finish > self.epsilon_start {
            return bad("train.epsilon_finish exceeds train.epsilon_start");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0 && self.lambda_ortho.is_finite() && self.lambda_ortho >= 0.0) {
            return bad("train.beta and train.lambda_ortho must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("train.rho must lie in [0, 1]");
        }
        if let Some(c) = self.clip {
            if !(c.is_finite() && c > 0.0) {
                return bad("train.clip must be positive");
            }
        }
        Ok(())
    }
}

/// Everything one `train` invocation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub scheme: SchemeKind,
    pub hidden: usize,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl RunConfig {
    pub fn new(env: EnvConfig, scheme: SchemeKind) -> Self {
        let train = TrainConfig::for_env(env.kind);
        RunConfig { env, scheme, hidden: 64, seeds: vec![train.seed], train }
    }

    pub fn scheme_config(&self) -> Result<SchemeConfig> {
        let env = self.env.build()?;
        let cfg = SchemeConfig::mlp(self.scheme, env.obs_dim(), self.hidden, env.n_actions(), env.n_agents(), self.train.rho);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        if self.hidden == 0 {
            return Err(Error::Config("scheme.hidden must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.scheme_config().map(|_| ())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        RunConfig::from_pairs(pairs.iter().map(|(k, v, line)| (k.as_str(), v.as_str(), *line)))
    }

    /// Builds a config from `(key, value, line)` triples; `line` only labels errors.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str, usize)>) -> Result<Self> {
        let mut map: BTreeMap<&str, (&str, usize)> = BTreeMap::new();
        for (k, v, line) in pairs {
            if map.insert(k, (v, line)).is_some() {
                return Err(Error::Parse { line, msg: format!("duplicate key `{k}`") });
            }
        }
        let kind = match map.remove("env.kind") {
            Some((v, line)) => v.parse::<EnvKind>().map_err(|e| Error::Parse { line, msg: e.to_string() })?,
            None => EnvKind::Foraging,
        };
        let mut cfg = RunConfig::new(EnvConfig::default_for(kind), SchemeKind::Prism);
        let mut seed_list = None;
        for (key, (value, line)) in map {
            let wrap = |e: Error| Error::Parse { line, msg: format!("{key}: {e}") };
            let c = &mut cfg;
            let t = &mut c.train;
            match key {
                "env.n_agents" => c.env.n_agents = num(value).map_err(wrap)?,
                "env.grid" => c.env.grid = num(value).map_err(wrap)?,
                "env.horizon" => c.env.horizon = num(value).map_err(wrap)?,
                "env.seed" => c.env.seed = num(value).map_err(wrap)?,
                "env.food" => c.env.food = num(value).map_err(wrap)?,
                "env.window" => c.env.window = num(value).map_err(wrap)?,
                "env.goal" => c.env.goal = num(value).map_err(wrap)?,
                "scheme.kind" => c.scheme = value.parse().map_err(wrap)?,
                "scheme.hidden" => c.hidden = num(value).map_err(wrap)?,
                "train.lr" => t.lr = num(value).map_err(wrap)?,
                "train.gamma" => t.gamma = num(value).map_err(wrap)?,
                "train.batch_size" => t.batch_size = num(value).map_err(wrap)?,
                "train.buffer_capacity" => t.buffer_capacity = num(value).map_err(wrap)?,
                "train.target_update_interval" => t.target_update_interval = num(value).map_err(wrap)?,
                "train.epsilon_start" => t.epsilon_start = num(value).map_err(wrap)?,
                "train.epsilon_finish" => t.epsilon_finish = num(value).map_err(wrap)?,
                "train.epsilon_anneal_steps" => t.epsilon_anneal_steps = num(value).map_err(wrap)?,
                "train.beta" => t.beta = num(value).map_err(wrap)?,
                "train.lambda_ortho" => t.lambda_ortho = num(value).map_err(wrap)?,
                "train.rho" => t.rho = num(value).map_err(wrap)?,
                "train.total_steps" => t.total_steps = num(value).map_err(wrap)?,
                "train.eval_interval" => t.eval_interval = num(value).map_err(wrap)?,
                "train.eval_episodes" => t.eval_episodes = num(value).map_err(wrap)?,
                "train.train_interval" => t.train_interval = num(value).map_err(wrap)?,
                "train.seed" => {
                    t.seed = num(value).map_err(wrap)?;
                    seed_list.get_or_insert_with(|| vec![t.seed]);
                }
                "train.seeds" => {
                    let seeds = value.split(',').map(|s| num(s.trim())).collect::<Result<Vec<u64>>>().map_err(wrap)?;
                    seed_list = Some(seeds);
                }
                "train.clip" => t.clip = if value == "none" { None } else { Some(num(value).map_err(wrap)?) },
                "train.optimizer" => t.optimizer = value.parse().map_err(wrap)?,
                "train.mirror_exploration" => t.mirror_exploration = num(value).map_err(wrap)?,
                other => return Err(Error::Parse { line, msg: format!("unknown key `{other}`") }),
            }
        }
        cfg.seeds = seed_list.unwrap_or_else(|| vec![cfg.train.seed]);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical `(key, value)` listing of every setting, seeds excluded.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let e = &self.env;
        vec![
            ("env.kind", e.kind.to_string()),
            ("env.n_agents", e.n_agents.to_string()),
            ("env.grid", e.grid.to_string()),
            ("env.horizon", e.horizon.to_string()),
            ("env.seed", e.seed.to_string()),
            ("env.food", e.food.to_string()),
            ("env.window", e.window.to_string()),
            ("env.goal", e.goal.to_string()),
            ("scheme.kind", self.scheme.to_string()),
            ("scheme.hidden", self.hidden.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.gamma", t.gamma.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.buffer_capacity", t.buffer_capacity.to_string()),
            ("train.target_update_interval", t.target_update_interval.to_string()),
            ("train.epsilon_start", t.epsilon_start.to_string()),
            ("train.epsilon_finish", t.epsilon_finish.to_string()),
            ("train.epsilon_anneal_steps", t.epsilon_anneal_steps.to_string()),
            ("train.beta", t.beta.to_string()),
            ("train.lambda_ortho", t.lambda_ortho.to_string()),
            ("train.rho", t.rho.to_string()),
            ("train.total_steps", t.total_steps.to_string()),
            ("train.eval_interval", t.eval_interval.to_string()),
            ("train.eval_episodes", t.eval_episodes.to_string()),
            ("train.train_interval", t.train_interval.to_string()),
            ("train.clip", t.clip.map_or_else(|| "none".to_string(), |c| c.to_string())),
            ("train.optimizer", t.optimizer.to_string()),
            ("train.mirror_exploration", t.mirror_exploration.to_string()),
        ]
    }
}

fn num<T: FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Config(format!("cannot parse `{s}`")))
}

/// Splits config text into `(key, value, line)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse { line: i + 1, msg: "expected `key = value`".into() })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Parse { line: i + 1, msg: "empty key or value".into() });
        }
        out.push((k.to_string(), v.to_string(), i + 1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_applies_env_defaults() {
        let cfg = RunConfig::parse(
            "# comment\nenv.kind = splitcontrol\nscheme.kind = NoPS  # trailing\ntrain.seeds = 0, 1,2\ntrain.clip = none\n",
        )
        .unwrap();
        assert_eq!(cfg.env, EnvConfig::split_control());
        assert_eq!(cfg.scheme, SchemeKind::NoPS);
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
        assert_eq!(cfg.train.beta, 0.1);
        assert_eq!(cfg.train.clip, None);
    }

    #[test]
    fn round_trips_through_pairs() {
        let mut cfg = RunConfig::new(EnvConfig::foraging(), SchemeKind::FuPS_ID);
        cfg.train.lr = 1e-3;
        cfg.train.mirror_exploration = true;
        let pairs = cfg.to_pairs();
        let back = RunConfig::from_pairs(pairs.iter().map(|(k, v)| (*k, v.as_str(), 0))).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::parse("env.kind = foraging\n\ntrain.gamma = x\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(matches!(RunConfig::parse("bogus.key = 1").unwrap_err(), Error::Parse { line: 1, .. }));
        assert!(matches!(RunConfig::parse("no equals sign").unwrap_err(), Error::Parse { line: 1, .. }));
        assert!(matches!(RunConfig::parse("train.lr = 1\ntrain.lr = 2").unwrap_err(), Error::Parse { line: 2, .. }));
    }

    #[test]
    fn validation_rejects_bad_values() {
        assert!(matches!(RunConfig::parse("train.gamma = 1.0"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("train.epsilon_finish = 0.9\ntrain.epsilon_start = 0.5"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("train.batch_size = 0"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("env.n_agents = 0"), Err(Error::Config(_))));
    }
}
