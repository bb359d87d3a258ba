use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// One joint step as stored in replay.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub next_obs: Vec<Vec<f64>>,
    pub done: bool,
}

/// A sampled minibatch laid out per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `obs[i]` is `batch x obs_dim` for agent `i`.
    pub obs: Vec<Matrix>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub next_obs: Vec<Matrix>,
    pub dones: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn from_transitions(items: &[&Transition]) -> Result<Batch> {
        let first = items.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let n = first.obs.len();
        let dim = first.obs.first().map_or(0, Vec::len);
        let gather = |pick: &dyn Fn(&Transition) -> &Vec<Vec<f64>>| -> Result<Vec<Matrix>> {
            (0..n)
                .map(|agent| {
                    let mut data = Vec::with_capacity(items.len() * dim);
                    for t in items {
                        let row = pick(t).get(agent).ok_or_else(|| Error::Contract("ragged transition".into()))?;
                        if row.len() != dim {
                            return Err(Error::Contract(format!("observation of length {} in a batch of {dim}", row.len())));
                        }
                        data.extend_from_slice(row);
                    }
                    Matrix::from_vec(items.len(), dim, data)
                })
                .collect()
        };
        Ok(Batch {
            obs: gather(&|t| &t.obs)?,
            actions: (0..n).map(|agent| items.iter().map(|t| t.actions[agent]).collect()).collect(),
            rewards: items.iter().map(|t| t.reward).collect(),
            next_obs: gather(&|t| &t.next_obs)?,
            dones: items.iter().map(|t| t.done).collect(),
        })
    }
}

/// Fixed-capacity ring buffer with a seeded uniform sampler.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer { items: Vec::with_capacity(capacity.min(1 << 16)), capacity, next: 0, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stores `t`, overwriting the oldest entry once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Uniform indices with replacement; `None` until `batch` items are stored.
    pub fn sample_indices(&mut self, batch: usize) -> Option<Vec<usize>> {
        if batch == 0 || self.items.len() < batch {
            return None;
        }
        let len = self.items.len();
        Some((0..batch).map(|_| self.rng.random_range(0..len)).collect())
    }

    pub fn sample(&mut self, batch: usize) -> Option<Result<Batch>> {
        let idx = self.sample_indices(batch)?;
        let picked: Vec<&Transition> = idx.iter().map(|&i| &self.items[i]).collect();
        Some(Batch::from_transitions(&picked))
    }

    pub fn get(&self, index: usize) -> Option<&Transition> {
        self.items.get(index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(v: f64) -> Transition {
        Transition { obs: vec![vec![v, 0.0], vec![v, 1.0]], actions: vec![0, 1], reward: v, next_obs: vec![vec![v + 1.0, 0.0], vec![v + 1.0, 1.0]], done: false }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3, 0).unwrap();
        for i in 0..5 {
            b.push(tr(i as f64));
        }
        assert_eq!(b.len(), 3);
        let rewards: Vec<f64> = (0..3).map(|i| b.get(i).unwrap().reward).collect();
        assert_eq!(rewards, vec![3.0, 4.0, 2.0]);
    }

    #[test]
    fn not_ready_below_batch_size() {
        let mut b = ReplayBuffer::new(10, 0).unwrap();
        b.push(tr(0.0));
        assert!(b.sample(2).is_none());
        b.push(tr(1.0));
        assert_eq!(b.sample(2).unwrap().unwrap().len(), 2);
    }

    #[test]
    fn batch_layout_is_per_agent() {
        let a = tr(1.0);
        let c = tr(2.0);
        let batch = Batch::from_transitions(&[&a, &c]).unwrap();
        assert_eq!(batch.obs[1].row(1), &[2.0, 1.0]);
        assert_eq!(batch.next_obs[0].row(0), &[2.0, 0.0]);
        assert_eq!(batch.actions, vec![vec![0, 0], vec![1, 1]]);
    }

    #[test]
    fn sampling_is_uniform() {
        let k = 50;
        let mut b = ReplayBuffer::new(k, 42).unwrap();
        for i in 0..k {
            b.push(tr(i as f64));
        }
        let draws = 100_000;
        let mut counts = vec![0usize; k];
        let mut taken = 0;
        while taken < draws {
            for i in b.sample_indices(k).unwrap() {
                counts[i] += 1;
            }
            taken += k;
        }
        let expected = draws as f64 / k as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // Upper 0.001 quantile of chi-squared with 49 degrees of freedom.
        assert!(chi2 < 85.35, "chi2 = {chi2}");
    }

    #[test]
    fn same_seed_same_samples() {
        let fill = |seed| {
            let mut b = ReplayBuffer::new(20, seed).unwrap();
            for i in 0..20 {
                b.push(tr(i as f64));
            }
            b.sample_indices(16).unwrap()
        };
        assert_eq!(fill(3), fill(3));
        assert_ne!(fill(3), fill(4));
    }
}
