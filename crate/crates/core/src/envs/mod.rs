//! Toy cooperative environments with a shared team reward.
//!
//! * [`Foraging`]: agents on a grid collect food under egocentric partial
//!   observation. Agents are interchangeable, so sharing parameters helps.
//! * [`SplitControl`]: every agent sees the same global vector but must move
//!   its own coordinate toward a role-dependent target, so any policy that
//!   treats agents identically is stuck.

mod foraging;
mod splitcontrol;

use std::fmt;
use std::str::FromStr;

pub use foraging::Foraging;
pub use splitcontrol::SplitControl;

use crate::error::{Error, Result};

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<Vec<f64>>,
    pub reward: f64,
    pub done: bool,
}

pub trait MultiAgentEnv: Send {
    fn n_agents(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn horizon(&self) -> usize;

    /// Starts a new episode and returns each agent's observation.
    fn reset(&mut self) -> Vec<Vec<f64>>;

    /// Applies one joint action (one index per agent).
    fn step(&mut self, actions: &[usize]) -> Result<StepOutcome>;

    /// Evaluation score of a finished episode.
    fn episode_score(&self, total_reward: f64, _steps: usize) -> f64 {
        total_reward
    }
}

pub(crate) fn check_actions(actions: &[usize], n_agents: usize, n_actions: usize) -> Result<()> {
    if actions.len() != n_agents {
        return Err(Error::Contract(format!("expected {n_agents} actions, got {}", actions.len())));
    }
    if let Some((agent, a)) = actions.iter().enumerate().find(|(_, &a)| a >= n_actions) {
        return Err(Error::Contract(format!("agent {agent} chose action {a}, only {n_actions} exist")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Foraging,
    SplitControl,
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::Foraging => "foraging",
            EnvKind::SplitControl => "splitcontrol",
        })
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "foraging" => Ok(EnvKind::Foraging),
            "splitcontrol" => Ok(EnvKind::SplitControl),
            other => Err(Error::Config(format!("unknown env kind `{other}`"))),
        }
    }
}

/// Environment settings; fields that do not apply to a kind are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub n_agents: usize,
    /// Foraging grid side.
    pub grid: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Foraging food count.
    pub food: usize,
    /// Foraging observation window side (odd).
    pub window: usize,
    /// Split-control target magnitude.
    pub goal: i32,
}

impl EnvConfig {
    pub fn foraging() -> Self {
        EnvConfig { kind: EnvKind::Foraging, n_agents: 3, grid: 6, horizon: 25, seed: 0, food: 3, window: 5, goal: 3 }
    }

    pub fn split_control() -> Self {
        EnvConfig { kind: EnvKind::SplitControl, n_agents: 2, grid: 6, horizon: 30, seed: 0, food: 3, window: 5, goal: 3 }
    }

    pub fn default_for(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Foraging => EnvConfig::foraging(),
            EnvKind::SplitControl => EnvConfig::split_control(),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        EnvConfig { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::Config("env.n_agents must be at least 1".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("env.horizon must be at least 1".into()));
        }
        match self.kind {
            EnvKind::Foraging => {
                if self.grid == 0 || self.food == 0 {
                    return Err(Error::Config("foraging needs a positive grid and food count".into()));
                }
                if self.n_agents + self.food > self.grid * self.grid {
                    return Err(Error::Config("grid too small for agents plus food".into()));
                }
                if self.window % 2 == 0 {
                    return Err(Error::Config("env.window must be odd".into()));
                }
            }
            EnvKind::SplitControl => {
                if self.goal <= 0 {
                    return Err(Error::Config("env.goal must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn MultiAgentEnv>> {
        self.validate()?;
        Ok(match self.kind {
            EnvKind::Foraging => Box::new(Foraging::new(self)?),
            EnvKind::SplitControl => Box::new(SplitControl::new(self)?),
        })
    }
}
