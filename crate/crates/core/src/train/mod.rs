//! Off-policy Q-learning for every sharing scheme.
//!
//! The team value is the sum of per-agent values, `Q_tot = Σ_i Q_i(o_i, a_i)`,
//! regressed onto `r + γ(1 − done)·Σ_i max_a Q̄_i(o'_i, a)` where `Q̄` is a
//! periodically hard-copied target network. Exploration is epsilon-greedy per
//! agent with a linear schedule; each gradient step minimizes
//! `mean TD² − β·J_div + λ·L_ortho`.

mod config;
mod optim;
mod replay;

use std::io::Write;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{parse_pairs, RunConfig, TrainConfig};
pub use optim::{Optimizer, OptimizerKind};
pub use replay::{Batch, ReplayBuffer, Transition};

use crate::autodiff::{global_norm, Tape};
use crate::envs::{EnvConfig, MultiAgentEnv};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numfmt::fmt_f64;
use crate::regularize::{total_objective, RegConfig};
use crate::report::MaskSnapshot;
use crate::schemes::{Model, SchemeConfig, SchemeKind};

/// Linear decay from `epsilon_start` to `epsilon_finish` over the anneal window.
pub fn epsilon_at(t: usize, cfg: &TrainConfig) -> f64 {
    if cfg.epsilon_anneal_steps == 0 || t >= cfg.epsilon_anneal_steps {
        return cfg.epsilon_finish;
    }
    let frac = t as f64 / cfg.epsilon_anneal_steps as f64;
    cfg.epsilon_start + frac * (cfg.epsilon_finish - cfg.epsilon_start)
}

/// `r + γ·(1 − done)·Σ_i next_q_max[i]`.
pub fn td_target(reward: f64, done: bool, next_q_max: &[f64], gamma: f64) -> f64 {
    if done {
        return reward;
    }
    reward + gamma * next_q_max.iter().sum::<f64>()
}

/// Losses and gradient norm of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub policy_loss: f64,
    pub j_div: f64,
    pub l_ortho: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// Gradients of the full objective for every parameter of `model`.
///
/// `beta` is forced to zero for schemes that do not train with diversity.
pub fn objective_gradients(
    model: &Model,
    target: &Model,
    batch: &Batch,
    gamma: f64,
    reg: RegConfig,
) -> Result<(Vec<Matrix>, StepMetrics)> {
    let n = model.n_agents();
    if batch.obs.len() != n || batch.is_empty() {
        return Err(Error::Contract(format!("batch for {} agents with {} rows, model has {n}", batch.obs.len(), batch.len())));
    }
    let b = batch.len();
    let mut next_sum = vec![0.0; b];
    for agent in 0..n {
        let q = target.q_values_batch(agent, &batch.next_obs[agent])?;
        for (r, acc) in next_sum.iter_mut().enumerate() {
            *acc += q.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let y: Vec<f64> = (0..b).map(|r| td_target(batch.rewards[r], batch.dones[r], &[next_sum[r]], gamma)).collect();

    let mut tape = Tape::new();
    let nodes = model.register(&mut tape, true)?;
    let mut picked = Vec::with_capacity(n);
    for agent in 0..n {
        let q = nodes.q_values(&mut tape, agent, &batch.obs[agent])?;
        picked.push(tape.pick(q, &batch.actions[agent])?);
    }
    let q_tot = tape.add_all(&picked)?;
    let y_node = tape.constant(Matrix::col_vector(&y));
    let err = tape.sub(q_tot, y_node)?;
    let sq = tape.square(err);
    let total_sq = tape.sum(sq);
    let policy = tape.scale(total_sq, 1.0 / b as f64);
    let (j_div, l_ortho) = nodes.regularizers(&mut tape)?;
    let reg = if model.kind().uses_diversity() { reg } else { RegConfig { beta: 0.0, ..reg } };
    let objective = total_objective(&mut tape, &[policy], j_div, l_ortho, reg)?;
    let mut grads = tape.backward(objective)?;
    let grads: Vec<Matrix> = nodes
        .ids
        .iter()
        .map(|&id| grads.take(id).ok_or_else(|| Error::Contract("parameter missing from backward pass".into())))
        .collect::<Result<_>>()?;
    let metrics = StepMetrics {
        policy_loss: tape.value(policy).item(),
        j_div: tape.value(j_div).item(),
        l_ortho: tape.value(l_ortho).item(),
        grad_norm: global_norm(&grads),
    };
    Ok((grads, metrics))
}

/// Online network, target network and optimizer state.
#[derive(Debug, Clone)]
pub struct Learner {
    model: Model,
    target: Model,
    optimizer: Optimizer,
    cfg: TrainConfig,
}

impl Learner {
    pub fn new(model: Model, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = Optimizer::new(cfg.optimizer, model.params());
        Ok(Learner { target: model.clone(), model, optimizer, cfg: cfg.clone() })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn target(&self) -> &Model {
        &self.target
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// Hard copy of the online parameters into the target network.
    pub fn sync_target(&mut self) {
        self.target.params_mut().clone_from_slice(self.model.params());
    }

    pub fn reg_config(&self) -> RegConfig {
        RegConfig { beta: self.cfg.beta, lambda_ortho: self.cfg.lambda_ortho }
    }

    /// One gradient step on a replay minibatch; `None` while the buffer is short.
    pub fn train_step(&mut self, buffer: &mut ReplayBuffer) -> Result<Option<StepMetrics>> {
        let batch = match buffer.sample(self.cfg.batch_size) {
            None => return Ok(None),
            Some(b) => b?,
        };
        self.update(&batch).map(Some)
    }

    /// One gradient step on a given minibatch.
    pub fn update(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let (grads, metrics) = objective_gradients(&self.model, &self.target, batch, self.cfg.gamma, self.reg_config())?;
        self.optimizer.step(self.model.params_mut(), &grads, self.cfg.lr, self.cfg.clip)?;
        Ok(metrics)
    }
}

/// Greedy actions of every agent.
pub fn greedy_actions(model: &Model, obs: &[Vec<f64>]) -> Result<Vec<usize>> {
    obs.iter().enumerate().map(|(agent, o)| Ok(argmax(&model.q_values(agent, o)?))).collect()
}

fn explore(model: &Model, obs: &[Vec<f64>], eps: f64, mirror: bool, n_actions: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let n = obs.len();
    if mirror {
        let u: f64 = rng.random();
        let a = rng.random_range(0..n_actions);
        return if u < eps { Ok(vec![a; n]) } else { greedy_actions(model, obs) };
    }
    let mut actions = Vec::with_capacity(n);
    for (agent, o) in obs.iter().enumerate() {
        let u: f64 = rng.random();
        actions.push(if u < eps { rng.random_range(0..n_actions) } else { argmax(&model.q_values(agent, o)?) });
    }
    Ok(actions)
}

/// Mean greedy episode score over `episodes` episodes of a freshly seeded env.
pub fn evaluate(model: &Model, env_cfg: &EnvConfig, episodes: usize) -> Result<f64> {
    let mut env = env_cfg.build()?;
    let mut total = 0.0;
    for _ in 0..episodes {
        total += run_episode(model, env.as_mut())?;
    }
    Ok(total / episodes as f64)
}

fn run_episode(model: &Model, env: &mut dyn MultiAgentEnv) -> Result<f64> {
    let mut obs = env.reset();
    let (mut ret, mut steps) = (0.0, 0);
    loop {
        let out = env.step(&greedy_actions(model, &obs)?)?;
        ret += out.reward;
        steps += 1;
        if out.done {
            return Ok(env.episode_score(ret, steps));
        }
        obs = out.obs;
    }
}

/// Independent deterministic stream `stream` of a run seed.
fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One evaluation point of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean greedy episode score.
    pub ret: f64,
    /// Metrics of the latest gradient step, NaN before the first one.
    pub policy_loss: f64,
    pub j_div: f64,
    pub l_ortho: f64,
}

/// Outcome of one seed.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub seed: u64,
    pub scheme: SchemeKind,
    pub evals: Vec<EvalRecord>,
    /// Masked separate spectra at each eval point; empty for schemes without masks.
    pub masks: Vec<MaskSnapshot>,
    pub model: Model,
}

impl TrainRun {
    pub fn final_return(&self) -> Option<f64> {
        self.evals.last().map(|e| e.ret)
    }
}

/// Trains one seed (`train.seed`) from scratch.
pub fn run_training(env_cfg: &EnvConfig, scheme: &SchemeConfig, train: &TrainConfig) -> Result<TrainRun> {
    env_cfg.validate()?;
    scheme.validate()?;
    train.validate()?;
    let seed = train.seed;
    let mut env = env_cfg.with_seed(env_cfg.seed.wrapping_add(derive_seed(seed, 1))).build()?;
    if env.obs_dim() != scheme.obs_dim() || env.n_actions() != scheme.n_actions() || env.n_agents() != scheme.n_agents {
        return Err(Error::Config("scheme dimensions do not match the environment".into()));
    }
    let eval_cfg = env_cfg.with_seed(env_cfg.seed.wrapping_add(derive_seed(seed, 2)));
    let model = Model::build(scheme, derive_seed(seed, 3))?;
    let mut learner = Learner::new(model, train)?;
    let mut buffer = ReplayBuffer::new(train.buffer_capacity, derive_seed(seed, 4))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 5));
    let n_actions = env.n_actions();
    let has_masks = learner.model().masked_spectra()?.iter().any(|layers| !layers.is_empty());

    let mut evals = Vec::new();
    let mut masks = Vec::new();
    let mut last = None::<StepMetrics>;
    let mut obs = env.reset();
    for t in 0..train.total_steps {
        let eps = epsilon_at(t, train);
        let actions = explore(learner.model(), &obs, eps, train.mirror_exploration, n_actions, &mut rng)?;
        let out = env.step(&actions)?;
        let next = if out.done { env.reset() } else { out.obs.clone() };
        buffer.push(Transition { obs, actions, reward: out.reward, next_obs: out.obs, done: out.done });
        obs = next;

        let step = t + 1;
        if step % train.train_interval == 0 {
            if let Some(m) = learner.train_step(&mut buffer)? {
                last = Some(m);
            }
        }
        if step % train.target_update_interval == 0 {
            learner.sync_target();
        }
        if step % train.eval_interval == 0 {
            let ret = evaluate(learner.model(), &eval_cfg, train.eval_episodes)?;
            let m = last.unwrap_or(StepMetrics { policy_loss: f64::NAN, j_div: f64::NAN, l_ortho: f64::NAN, grad_norm: f64::NAN });
            evals.push(EvalRecord { step, ret, policy_loss: m.policy_loss, j_div: m.j_div, l_ortho: m.l_ortho });
            if has_masks {
                masks.push(MaskSnapshot::new(step, learner.model().masked_spectra()?)?);
            }
        }
    }
    Ok(TrainRun { seed, scheme: scheme.kind, evals, masks, model: learner.into_model() })
}

/// Trains every seed of `cfg`, in parallel when cores allow; results follow `cfg.seeds`.
pub fn run_seeds(cfg: &RunConfig) -> Result<Vec<TrainRun>> {
    cfg.validate()?;
    let scheme = cfg.scheme_config()?;
    let jobs: Vec<TrainConfig> = cfg.seeds.iter().map(|&seed| TrainConfig { seed, ..cfg.train.clone() }).collect();
    parallel_map(&jobs, |train| run_training(&cfg.env, &scheme, train))
}

/// Applies `f` to every item on up to `available_parallelism` threads, keeping order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    let chunk = items.len().div_ceil(workers);
    thread::scope(|s| {
        for (part, out) in items.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            let f = &f;
            s.spawn(move || {
                for (item, slot) in part.iter().zip(out.iter_mut()) {
                    *slot = Some(f(item));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot is filled")).collect()
}

pub const METRICS_HEADER: &str = "step,seed,return,policy_loss,j_div,l_ortho";

pub fn metrics_rows(run: &TrainRun) -> Vec<String> {
    run.evals
        .iter()
        .map(|e| {
            format!(
                "{},{},{},{},{},{}",
                e.step,
                run.seed,
                fmt_f64(e.ret),
                fmt_f64(e.policy_loss),
                fmt_f64(e.j_div),
                fmt_f64(e.l_ortho)
            )
        })
        .collect()
}

pub fn write_metrics_csv(runs: &[TrainRun], out: &mut impl Write) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for run in runs {
        for row in metrics_rows(run) {
            writeln!(out, "{row}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;

    fn tiny(kind: SchemeKind, env: EnvKind) -> RunConfig {
        let mut cfg = RunConfig::new(EnvConfig::default_for(env), kind);
        cfg.hidden = 8;
        cfg.train.total_steps = 300;
        cfg.train.eval_interval = 100;
        cfg.train.eval_episodes = 2;
        cfg.train.epsilon_anneal_steps = 200;
        cfg
    }

    fn filled_buffer(cfg: &RunConfig, n: usize) -> ReplayBuffer {
        let mut env = cfg.env.build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut buf = ReplayBuffer::new(1000, 1).unwrap();
        let mut obs = env.reset();
        for _ in 0..n {
            let actions: Vec<usize> = (0..env.n_agents()).map(|_| rng.random_range(0..env.n_actions())).collect();
            let out = env.step(&actions).unwrap();
            let next = if out.done { env.reset() } else { out.obs.clone() };
            buf.push(Transition { obs, actions, reward: out.reward, next_obs: out.obs, done: out.done });
            obs = next;
        }
        buf
    }

    fn learner(cfg: &RunConfig) -> Learner {
        let model = Model::build(&cfg.scheme_config().unwrap(), 5).unwrap();
        Learner::new(model, &cfg.train).unwrap()
    }

    #[test]
    fn epsilon_schedule() {
        let cfg = TrainConfig { epsilon_anneal_steps: 1000, ..TrainConfig::default() };
        assert_eq!(epsilon_at(0, &cfg), 1.0);
        assert_eq!(epsilon_at(1000, &cfg), 0.05);
        assert_eq!(epsilon_at(50_000, &cfg), 0.05);
        assert!((epsilon_at(500, &cfg) - 0.525).abs() < 1e-15);
    }

    #[test]
    fn td_target_examples() {
        assert_eq!(td_target(1.0, true, &[5.0, 7.0], 0.99), 1.0);
        assert!((td_target(1.0, false, &[1.5, 0.5], 0.99) - 2.98).abs() < 1e-12);
        assert_eq!(td_target(0.3, false, &[10.0], 0.0), 0.3);
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }

    #[test]
    fn not_ready_returns_none() {
        let cfg = tiny(SchemeKind::FuPS, EnvKind::SplitControl);
        let mut l = learner(&cfg);
        let mut buf = filled_buffer(&cfg, 5);
        assert_eq!(l.train_step(&mut buf).unwrap(), None);
    }

    #[test]
    fn non_spectral_schemes_report_zero_regularizers() {
        for kind in [SchemeKind::NoPS, SchemeKind::FuPS, SchemeKind::FuPS_ID] {
            let cfg = tiny(kind, EnvKind::Foraging);
            let mut l = learner(&cfg);
            let mut buf = filled_buffer(&cfg, 64);
            let m = l.train_step(&mut buf).unwrap().unwrap();
            assert_eq!((m.j_div, m.l_ortho), (0.0, 0.0));
            assert!(m.policy_loss > 0.0);
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut cfg = tiny(SchemeKind::Prism, EnvKind::SplitControl);
        cfg.train.lr = 0.0;
        let mut l = learner(&cfg);
        let before = l.model().params().to_vec();
        let mut buf = filled_buffer(&cfg, 64);
        l.train_step(&mut buf).unwrap().unwrap();
        assert_eq!(l.model().params(), &before[..]);
    }

    #[test]
    fn zero_coefficients_give_the_plain_td_gradient() {
        let cfg = tiny(SchemeKind::Prism, EnvKind::SplitControl);
        let l = learner(&cfg);
        let batch = filled_buffer(&cfg, 64).sample(32).unwrap().unwrap();
        let (g_reg, _) = objective_gradients(l.model(), l.target(), &batch, 0.99, RegConfig { beta: 0.0, lambda_ortho: 0.0 }).unwrap();
        // Plain TD gradient, built directly on a fresh tape.
        let model = l.model();
        let mut tape = Tape::new();
        let nodes = model.register(&mut tape, true).unwrap();
        let mut y = vec![0.0; batch.len()];
        for agent in 0..2 {
            let q = l.target().q_values_batch(agent, &batch.next_obs[agent]).unwrap();
            for (r, v) in y.iter_mut().enumerate() {
                *v += q.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            }
        }
        for (r, v) in y.iter_mut().enumerate() {
            *v = td_target(batch.rewards[r], batch.dones[r], &[*v], 0.99);
        }
        let mut picked = Vec::new();
        for agent in 0..2 {
            let q = nodes.q_values(&mut tape, agent, &batch.obs[agent]).unwrap();
            picked.push(tape.pick(q, &batch.actions[agent]).unwrap());
        }
        let qt = tape.add_all(&picked).unwrap();
        let yc = tape.constant(Matrix::col_vector(&y));
        let e = tape.sub(qt, yc).unwrap();
        let sq = tape.square(e);
        let s = tape.sum(sq);
        let loss = tape.scale(s, 1.0 / batch.len() as f64);
        let g = tape.backward(loss).unwrap();
        for (i, &id) in nodes.ids.iter().enumerate() {
            assert!(g.get(id).unwrap().max_abs_diff(&g_reg[i]) <= 1e-12);
        }
    }

    #[test]
    fn every_prism_leaf_receives_a_gradient() {
        let mut cfg = tiny(SchemeKind::Prism, EnvKind::SplitControl);
        cfg.env.n_agents = 3;
        let l = learner(&cfg);
        let batch = filled_buffer(&cfg, 64).sample(32).unwrap().unwrap();
        let (grads, m) = objective_gradients(l.model(), l.target(), &batch, 0.99, RegConfig { beta: 0.5, lambda_ortho: 0.1 }).unwrap();
        assert_eq!(grads.len(), l.model().params().len());
        for (g, info) in grads.iter().zip(l.model().param_info()) {
            assert!(g.is_finite());
            let nonzero = g.data().iter().any(|&v| v != 0.0);
            if !info.name.contains(".t[") {
                assert!(nonzero, "{} has an all-zero gradient", info.name);
            }
        }
        assert!(m.policy_loss > 0.0);
    }

    #[test]
    fn larger_beta_lowers_the_objective_when_masks_differ() {
        let cfg = tiny(SchemeKind::Prism, EnvKind::SplitControl);
        let mut model = Model::build(&cfg.scheme_config().unwrap(), 2).unwrap();
        // Push one agent's thresholds apart so the binarized masks disagree.
        let t1 = model.param_info().iter().position(|p| p.name.ends_with(".t[1]")).unwrap();
        model.params_mut()[t1].data_mut().iter_mut().step_by(2).for_each(|v| *v = 5.0);
        let objective = |beta: f64| {
            let mut tape = Tape::new();
            let nodes = model.register(&mut tape, false).unwrap();
            let (j, o) = nodes.regularizers(&mut tape).unwrap();
            let p = tape.constant(Matrix::scalar(0.7));
            let obj = total_objective(&mut tape, &[p], j, o, RegConfig { beta, lambda_ortho: 0.01 }).unwrap();
            (tape.value(j).item(), tape.value(obj).item())
        };
        let (j, low) = objective(0.1);
        assert!(j > 0.0);
        assert!(objective(1.0).1 < low);
    }

    #[test]
    fn target_changes_only_at_sync() {
        let mut cfg = tiny(SchemeKind::FuPS, EnvKind::SplitControl);
        cfg.train.lr = 1e-2;
        let mut l = learner(&cfg);
        let mut buf = filled_buffer(&cfg, 64);
        let frozen = l.target().params().to_vec();
        for _ in 0..5 {
            l.train_step(&mut buf).unwrap();
            assert_eq!(l.target().params(), &frozen[..]);
        }
        assert_ne!(l.model().params(), &frozen[..]);
        l.sync_target();
        assert_eq!(l.target().params(), l.model().params());
    }

    #[test]
    fn zero_steps_give_empty_metrics() {
        let mut cfg = tiny(SchemeKind::Prism, EnvKind::Foraging);
        cfg.train.total_steps = 0;
        let runs = run_seeds(&cfg).unwrap();
        assert!(runs[0].evals.is_empty());
        let mut out = Vec::new();
        write_metrics_csv(&runs, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), format!("{METRICS_HEADER}\n"));
    }

    #[test]
    fn same_seed_same_metrics() {
        for kind in [SchemeKind::Prism, SchemeKind::NoPS] {
            let mut cfg = tiny(kind, EnvKind::Foraging);
            cfg.seeds = vec![3, 4];
            let csv = || {
                let mut out = Vec::new();
                write_metrics_csv(&run_seeds(&cfg).unwrap(), &mut out).unwrap();
                out
            };
            let a = csv();
            assert_eq!(a, csv());
            assert_eq!(String::from_utf8(a).unwrap().lines().count(), 1 + 2 * 3);
        }
    }

    #[test]
    fn mismatched_scheme_is_rejected_before_stepping() {
        let cfg = tiny(SchemeKind::FuPS, EnvKind::Foraging);
        let wrong = SchemeConfig::mlp(SchemeKind::FuPS, 7, 8, 5, 3, 0.5);
        assert!(matches!(run_training(&cfg.env, &wrong, &cfg.train), Err(Error::Config(_))));
    }
}
