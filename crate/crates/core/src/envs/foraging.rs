use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_actions, EnvConfig, MultiAgentEnv, StepOutcome};
use crate::error::{Error, Result};

/// Up, down, left, right, no-op.
pub const FORAGING_ACTIONS: usize = 5;
const CHANNELS: usize = 3;

/// Grid foraging with egocentric windows.
///
/// Observation channels, each a `window x window` plane flattened row-major:
/// other agents, uncollected food, cells outside the grid. The team reward
/// of a step is the fraction of all food collected during that step.
#[derive(Debug, Clone)]
pub struct Foraging {
    grid: usize,
    n_agents: usize,
    n_food: usize,
    window: usize,
    horizon: usize,
    rng: ChaCha8Rng,
    agents: Vec<(usize, usize)>,
    food: Vec<(usize, usize)>,
    collected: Vec<bool>,
    t: usize,
    done: bool,
}

impl Foraging {
    pub fn new(cfg: &EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let mut env = Foraging {
            grid: cfg.grid,
            n_agents: cfg.n_agents,
            n_food: cfg.food,
            window: cfg.window,
            horizon: cfg.horizon,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            agents: Vec::new(),
            food: Vec::new(),
            collected: Vec::new(),
            t: 0,
            done: true,
        };
        env.reset();
        Ok(env)
    }

    pub fn agent_positions(&self) -> &[(usize, usize)] {
        &self.agents
    }

    pub fn food_positions(&self) -> &[(usize, usize)] {
        &self.food
    }

    pub fn collected(&self) -> &[bool] {
        &self.collected
    }

    /// Places agents and food explicitly; the episode restarts at step 0.
    pub fn set_layout(&mut self, agents: Vec<(usize, usize)>, food: Vec<(usize, usize)>) -> Result<Vec<Vec<f64>>> {
        if agents.len() != self.n_agents || food.len() != self.n_food {
            return Err(Error::Contract("layout has the wrong number of agents or food".into()));
        }
        if agents.iter().chain(&food).any(|&(r, c)| r >= self.grid || c >= self.grid) {
            return Err(Error::Contract("layout position outside the grid".into()));
        }
        self.agents = agents;
        self.food = food;
        self.collected = vec![false; self.n_food];
        self.t = 0;
        self.done = false;
        Ok(self.observe())
    }

    fn observe(&self) -> Vec<Vec<f64>> {
        let w = self.window;
        let half = (w / 2) as isize;
        let plane = w * w;
        (0..self.n_agents)
            .map(|i| {
                let (ar, ac) = self.agents[i];
                let mut obs = vec![0.0; CHANNELS * plane];
                for dr in -half..=half {
                    for dc in -half..=half {
                        let cell = ((dr + half) as usize) * w + (dc + half) as usize;
                        let (r, c) = (ar as isize + dr, ac as isize + dc);
                        if r < 0 || c < 0 || r >= self.grid as isize || c >= self.grid as isize {
                            obs[2 * plane + cell] = 1.0;
                            continue;
                        }
                        let pos = (r as usize, c as usize);
                        if self.agents.iter().enumerate().any(|(j, &p)| j != i && p == pos) {
                            obs[cell] = 1.0;
                        }
                        if self.food.iter().zip(&self.collected).any(|(&f, &done)| !done && f == pos) {
                            obs[plane + cell] = 1.0;
                        }
                    }
                }
                obs
            })
            .collect()
    }
}

impl MultiAgentEnv for Foraging {
    fn n_agents(&self) -> usize {
        self.n_agents
    }

    fn obs_dim(&self) -> usize {
        CHANNELS * self.window * self.window
    }

    fn n_actions(&self) -> usize {
        FORAGING_ACTIONS
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self) -> Vec<Vec<f64>> {
        let cells = self.grid * self.grid;
        let picks = sample(&mut self.rng, cells, self.n_agents + self.n_food);
        let pos: Vec<(usize, usize)> = picks.iter().map(|c| (c / self.grid, c % self.grid)).collect();
        self.agents = pos[..self.n_agents].to_vec();
        self.food = pos[self.n_agents..].to_vec();
        self.collected = vec![false; self.n_food];
        self.t = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        check_actions(actions, self.n_agents, FORAGING_ACTIONS)?;
        let last = self.grid - 1;
        for (pos, &a) in self.agents.iter_mut().zip(actions) {
            match a {
                0 if pos.0 > 0 => pos.0 -= 1,
                1 if pos.0 < last => pos.0 += 1,
                2 if pos.1 > 0 => pos.1 -= 1,
                3 if pos.1 < last => pos.1 += 1,
                _ => {}
            }
        }
        let mut newly = 0;
        for (f, done) in self.food.iter().zip(self.collected.iter_mut()) {
            if !*done && self.agents.contains(f) {
                *done = true;
                newly += 1;
            }
        }
        self.t += 1;
        let all = self.collected.iter().all(|&c| c);
        self.done = all || self.t >= self.horizon;
        Ok(StepOutcome { obs: self.observe(), reward: newly as f64 / self.n_food as f64, done: self.done })
    }
}
