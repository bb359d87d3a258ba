use super::{check_actions, EnvConfig, MultiAgentEnv, StepOutcome};
use crate::error::{Error, Result};

/// Move down, stay, move up.
pub const SPLIT_ACTIONS: usize = 3;

/// Each agent steers one coordinate of `x` toward its own target.
///
/// Agent `i`'s target is `+g` for even `i` and `−g` for odd `i`. All agents
/// observe the same vector `(x / g, targets / g)`. Coordinates are clamped to
/// `[−g, g]`; the per-step team reward is `−Σ|x_i − target_i| / (n·g)`
/// clipped below at `−1`.
#[derive(Debug, Clone)]
pub struct SplitControl {
    n_agents: usize,
    goal: i32,
    horizon: usize,
    x: Vec<i32>,
    t: usize,
    done: bool,
}

impl SplitControl {
    pub fn new(cfg: &EnvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SplitControl {
            n_agents: cfg.n_agents,
            goal: cfg.goal,
            horizon: cfg.horizon,
            x: vec![0; cfg.n_agents],
            t: 0,
            done: false,
        })
    }

    pub fn target(&self, agent: usize) -> i32 {
        if agent % 2 == 0 {
            self.goal
        } else {
            -self.goal
        }
    }

    pub fn position(&self) -> &[i32] {
        &self.x
    }

    /// Puts the coordinates at `x` (clamped) without touching the step count.
    pub fn set_position(&mut self, x: &[i32]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.n_agents {
            return Err(Error::Contract(format!("expected {} coordinates", self.n_agents)));
        }
        self.x = x.iter().map(|&v| v.clamp(-self.goal, self.goal)).collect();
        Ok(self.observe())
    }

    /// Team reward at the current position.
    pub fn reward(&self) -> f64 {
        let dist: i64 = self.x.iter().enumerate().map(|(i, &x)| (x - self.target(i)).abs() as i64).sum();
        let raw = -(dist as f64) / (self.n_agents as f64 * self.goal as f64);
        raw.max(-1.0)
    }

    fn observe(&self) -> Vec<Vec<f64>> {
        let g = self.goal as f64;
        let mut shared: Vec<f64> = self.x.iter().map(|&x| x as f64 / g).collect();
        shared.extend((0..self.n_agents).map(|i| self.target(i) as f64 / g));
        vec![shared; self.n_agents]
    }
}

impl MultiAgentEnv for SplitControl {
    fn n_agents(&self) -> usize {
        self.n_agents
    }

    fn obs_dim(&self) -> usize {
        2 * self.n_agents
    }

    fn n_actions(&self) -> usize {
        SPLIT_ACTIONS
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self) -> Vec<Vec<f64>> {
        self.x = vec![0; self.n_agents];
        self.t = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        check_actions(actions, self.n_agents, SPLIT_ACTIONS)?;
        for (x, &a) in self.x.iter_mut().zip(actions) {
            *x = (*x + a as i32 - 1).clamp(-self.goal, self.goal);
        }
        self.t += 1;
        self.done = self.t >= self.horizon;
        Ok(StepOutcome { obs: self.observe(), reward: self.reward(), done: self.done })
    }

    /// Mean per-step reward, in `[−1, 0]`.
    fn episode_score(&self, total_reward: f64, steps: usize) -> f64 {
        if steps == 0 {
            0.0
        } else {
            total_reward / steps as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn env(n: usize) -> SplitControl {
        SplitControl::new(&EnvConfig { n_agents: n, ..EnvConfig::split_control() }).unwrap()
    }

    #[test]
    fn reward_examples() {
        let mut e = env(2);
        e.reset();
        assert_eq!(e.reward(), -1.0);
        e.set_position(&[3, -3]).unwrap();
        assert_eq!(e.reward(), 0.0);
        e.set_position(&[2, -3]).unwrap();
        assert!((e.reward() + 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn reaching_targets_earns_zero_per_step() {
        let mut e = env(2);
        e.reset();
        for _ in 0..3 {
            e.step(&[2, 0]).unwrap();
        }
        let out = e.step(&[1, 1]).unwrap();
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn identical_observations_but_opposite_targets() {
        let mut e = env(2);
        let obs = e.reset();
        assert_eq!(obs[0], obs[1]);
        assert_ne!(e.target(0), e.target(1));
        assert_eq!(obs[0], vec![0.0, 0.0, 1.0, -1.0]);
    }

    #[test]
    fn horizon_and_errors() {
        let mut e = env(3);
        e.reset();
        for t in 0..30 {
            let out = e.step(&[1, 1, 1]).unwrap();
            assert_eq!(out.done, t == 29);
        }
        assert!(e.step(&[1, 1, 1]).is_err());
        e.reset();
        assert!(matches!(e.step(&[3, 1, 1]), Err(Error::Contract(_))));
    }

    #[test]
    fn per_step_reward_is_bounded() {
        let mut e = env(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            e.reset();
            for _ in 0..30 {
                let a: Vec<usize> = (0..3).map(|_| rng.random_range(0..3)).collect();
                let r = e.step(&a).unwrap().reward;
                assert!((-1.0..=0.0).contains(&r));
            }
        }
    }

    /// Return of a deterministic joint policy from reset over `horizon` steps.
    fn rollout(horizon: usize, policy: impl Fn(&[f64]) -> [usize; 2]) -> f64 {
        let mut e = SplitControl::new(&EnvConfig { horizon, ..EnvConfig::split_control() }).unwrap();
        let mut obs = e.reset();
        let mut total = 0.0;
        loop {
            let out = e.step(&policy(&obs[0])).unwrap();
            total += out.reward;
            obs = out.obs;
            if out.done {
                return total;
            }
        }
    }

    #[test]
    fn every_symmetric_policy_is_strictly_worse_than_the_role_aware_optimum() {
        let horizon = 4;
        // Under a symmetric policy x stays on the diagonal, so the reachable
        // observations are x = (y, y) with |y| ≤ min(horizon, g).
        let ys: Vec<i32> = (-3..=3).collect();
        let optimum = rollout(horizon, |_| [2, 0]);
        assert!((optimum - (-4.0 / 6.0 - 2.0 / 6.0)).abs() < 1e-12);
        let n_policies = 3usize.pow(ys.len() as u32);
        let mut best_symmetric = f64::NEG_INFINITY;
        for code in 0..n_policies {
            let mut table = BTreeMap::new();
            let mut c = code;
            for &y in &ys {
                table.insert(y, c % 3);
                c /= 3;
            }
            let ret = rollout(horizon, |obs| {
                let y = (obs[0] * 3.0).round() as i32;
                let a = table[&y];
                [a, a]
            });
            best_symmetric = best_symmetric.max(ret);
        }
        assert!(best_symmetric < optimum);
        assert_eq!(best_symmetric, -(horizon as f64));
    }
}
