//! Evaluation statistics, mask diagnostics and the ablation sweep.
//!
//! Every CSV uses a header row, comma delimiters and 17-significant-digit floats.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numfmt::{fmt_f64, parse_f64};
use crate::schemes::SchemeKind;
use crate::train::{self, parse_pairs, RunConfig, TrainConfig, TrainRun, METRICS_HEADER};

/// Interquartile mean: drop `floor(n/4)` sorted values from each end and
/// average the rest. Fewer than four values fall back to the plain mean.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("iqm of an empty list".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let cut = v.len() / 4;
    Ok(mean(&v[cut..v.len() - cut]))
}

/// Mean accumulated relative to the first value, so constant inputs are exact.
fn mean(v: &[f64]) -> f64 {
    let base = v[0];
    base + v.iter().map(|x| x - base).sum::<f64>() / v.len() as f64
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let a = sorted[lo];
    a + (pos - lo as f64) * (sorted[hi] - a)
}

/// Percentile bootstrap interval of the IQM.
pub fn bootstrap_ci(values: &[f64], level: f64, resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Contract("bootstrap of an empty list".into()));
    }
    if !(level > 0.0 && level < 1.0) || resamples == 0 {
        return Err(Error::Contract(format!("bootstrap needs level in (0, 1) and resamples > 0, got {level}, {resamples}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut stats = Vec::with_capacity(resamples);
    let mut draw = vec![0.0; n];
    for _ in 0..resamples {
        for d in draw.iter_mut() {
            *d = values[rng.random_range(0..n)];
        }
        stats.push(iqm(&draw)?);
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&stats, tail), quantile(&stats, 1.0 - tail)))
}

/// Evaluation returns of several seeds, aligned by step.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub label: String,
    pub scheme: Option<SchemeKind>,
    /// `(step, return of each seed)`, ascending in step.
    pub points: Vec<(usize, Vec<f64>)>,
}

impl RunMetrics {
    pub fn from_runs(label: impl Into<String>, runs: &[TrainRun]) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::Contract("no runs to aggregate".into()))?;
        let mut points: Vec<(usize, Vec<f64>)> = first.evals.iter().map(|e| (e.step, Vec::new())).collect();
        for run in runs {
            if run.evals.len() != points.len() || run.scheme != first.scheme {
                return Err(Error::Contract("runs disagree on eval points or scheme".into()));
            }
            for (p, e) in points.iter_mut().zip(&run.evals) {
                if p.0 != e.step {
                    return Err(Error::Contract("runs disagree on eval steps".into()));
                }
                p.1.push(e.ret);
            }
        }
        Ok(RunMetrics { label: label.into(), scheme: Some(first.scheme), points })
    }

    /// Reads a metrics CSV (`step,seed,return,...`).
    pub fn from_csv(label: impl Into<String>, text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == METRICS_HEADER => {}
            _ => return Err(Error::Parse { line: 1, msg: format!("expected header `{METRICS_HEADER}`") }),
        }
        let mut by_step: BTreeMap<usize, BTreeMap<u64, f64>> = BTreeMap::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Parse { line: i + 1, msg: msg.to_string() };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            let step = f[0].parse().map_err(|_| bad("bad step"))?;
            let seed = f[1].parse().map_err(|_| bad("bad seed"))?;
            let ret = parse_f64(f[2]).ok_or_else(|| bad("bad return"))?;
            if by_step.entry(step).or_default().insert(seed, ret).is_some() {
                return Err(bad("duplicate (step, seed)"));
            }
        }
        let points: Vec<(usize, Vec<f64>)> = by_step.into_iter().map(|(s, m)| (s, m.into_values().collect())).collect();
        if let Some(n) = points.first().map(|p| p.1.len()) {
            if points.iter().any(|p| p.1.len() != n) {
                return Err(Error::Contract("eval points carry different seed counts".into()));
            }
        }
        Ok(RunMetrics { label: label.into(), scheme: None, points })
    }

    pub fn iqm_curve(&self) -> Result<Vec<(usize, f64)>> {
        self.points.iter().map(|(s, v)| Ok((*s, iqm(v)?))).collect()
    }

    pub fn final_iqm(&self) -> Result<f64> {
        let (_, v) = self.points.last().ok_or_else(|| Error::Contract("no eval points".into()))?;
        iqm(v)
    }

    /// First step whose IQM reaches `threshold`.
    pub fn first_crossing(&self, threshold: f64) -> Result<Option<usize>> {
        Ok(self.iqm_curve()?.into_iter().find(|&(_, v)| v >= threshold).map(|(s, _)| s))
    }
}

pub const IQM_HEADER: &str = "step,n_seeds,iqm,ci_lo,ci_hi";

/// Per-step IQM with a 95% bootstrap interval (2000 resamples).
pub fn iqm_csv(metrics: &RunMetrics, seed: u64) -> Result<String> {
    let mut out = format!("{IQM_HEADER}\n");
    for (step, v) in &metrics.points {
        let (lo, hi) = bootstrap_ci(v, 0.95, 2000, seed)?;
        writeln!(out, "{step},{},{},{},{}", v.len(), fmt_f64(iqm(v)?), fmt_f64(lo), fmt_f64(hi)).expect("write to String");
    }
    Ok(out)
}

/// Masked separate spectra `s_separate ⊙ m_i` at one eval point.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSnapshot {
    pub step: usize,
    /// `spectra[agent][layer]`.
    pub spectra: Vec<Vec<Vec<f64>>>,
}

impl MaskSnapshot {
    pub fn new(step: usize, spectra: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if let Some(first) = spectra.first() {
            let shape: Vec<usize> = first.iter().map(Vec::len).collect();
            if spectra.iter().any(|a| a.iter().map(Vec::len).ne(shape.iter().copied())) {
                return Err(Error::Contract(format!("inconsistent masked spectrum lengths at step {step}")));
            }
        }
        Ok(MaskSnapshot { step, spectra })
    }

    pub fn n_agents(&self) -> usize {
        self.spectra.len()
    }

    /// All layers of one agent, concatenated in layer order.
    pub fn flat(&self, agent: usize) -> Vec<f64> {
        self.spectra[agent].concat()
    }

    /// `d[i][j] = ‖flat(i) − flat(j)‖₁`.
    pub fn pairwise_l1(&self) -> Vec<Vec<f64>> {
        let flats: Vec<Vec<f64>> = (0..self.n_agents()).map(|a| self.flat(a)).collect();
        flats.iter().map(|x| flats.iter().map(|y| x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum()).collect()).collect()
    }

    /// Mean distance over unordered pairs of distinct agents; zero for one agent.
    pub fn mean_pairwise_l1(&self) -> f64 {
        let d = self.pairwise_l1();
        let n = d.len();
        if n < 2 {
            return 0.0;
        }
        let total: f64 = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| d[i][j]).sum();
        total / (n * (n - 1) / 2) as f64
    }
}

pub const HEATMAP_HEADER: &str = "step,agent,index,value";
pub const DISTANCE_HEADER: &str = "step,agent_i,agent_j,l1";

/// Heatmap and pairwise-distance CSVs for a sequence of snapshots.
pub fn mask_diagnostics(snapshots: &[MaskSnapshot]) -> Result<(String, String)> {
    let first = snapshots.first().ok_or_else(|| Error::Contract("no mask snapshots".into()))?;
    let width = first.spectra.first().map_or(0, |a| a.iter().map(Vec::len).sum::<usize>());
    let mut heat = format!("{HEATMAP_HEADER}\n");
    let mut dist = format!("{DISTANCE_HEADER}\n");
    for snap in snapshots {
        if snap.n_agents() != first.n_agents() {
            return Err(Error::Contract(format!("snapshot at step {} has {} agents", snap.step, snap.n_agents())));
        }
        for agent in 0..snap.n_agents() {
            let flat = snap.flat(agent);
            if flat.len() != width {
                return Err(Error::Contract(format!("snapshot at step {} has length {} instead of {width}", snap.step, flat.len())));
            }
            for (i, v) in flat.iter().enumerate() {
                writeln!(heat, "{},{agent},{i},{}", snap.step, fmt_f64(*v)).expect("write to String");
            }
        }
        for (i, row) in snap.pairwise_l1().iter().enumerate() {
            for (j, d) in row.iter().enumerate() {
                writeln!(dist, "{},{i},{j},{}", snap.step, fmt_f64(*d)).expect("write to String");
            }
        }
    }
    Ok((heat, dist))
}

/// Reads heatmap-format rows back into snapshots, one flat layer per agent.
pub fn parse_snapshots_csv(text: &str) -> Result<Vec<MaskSnapshot>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == HEATMAP_HEADER => {}
        _ => return Err(Error::Parse { line: 1, msg: format!("expected header `{HEATMAP_HEADER}`") }),
    }
    let mut data: BTreeMap<usize, BTreeMap<usize, BTreeMap<usize, f64>>> = BTreeMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse { line: i + 1, msg: msg.to_string() };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let step = f[0].parse().map_err(|_| bad("bad step"))?;
        let agent = f[1].parse().map_err(|_| bad("bad agent"))?;
        let index = f[2].parse().map_err(|_| bad("bad index"))?;
        let value = parse_f64(f[3]).ok_or_else(|| bad("bad value"))?;
        data.entry(step).or_default().entry(agent).or_default().insert(index, value);
    }
    data.into_iter()
        .map(|(step, agents)| {
            let mut spectra = Vec::new();
            for (expect, (agent, idx)) in agents.into_iter().enumerate() {
                if agent != expect || idx.keys().enumerate().any(|(k, &i)| k != i) {
                    return Err(Error::Contract(format!("gaps in agents or indices at step {step}")));
                }
                spectra.push(vec![idx.into_values().collect()]);
            }
            MaskSnapshot::new(step, spectra)
        })
        .collect()
}

/// Expands a grid file into cells. Any key with a comma-separated value list
/// (other than `train.seeds`) is swept; the cross product of all swept keys
/// forms the cells, in file order with the last key varying fastest.
pub fn expand_grid(text: &str) -> Result<Vec<RunConfig>> {
    let pairs = parse_pairs(text)?;
    let mut axes: Vec<(String, Vec<String>, usize)> = Vec::new();
    for (k, v, line) in pairs {
        let values = if k == "train.seeds" { vec![v] } else { v.split(',').map(|s| s.trim().to_string()).collect() };
        if values.iter().any(String::is_empty) {
            return Err(Error::Parse { line, msg: format!("empty value in `{k}`") });
        }
        axes.push((k, values, line));
    }
    let total: usize = axes.iter().map(|a| a.1.len()).product();
    let mut cells = Vec::with_capacity(total);
    for mut code in 0..total {
        let mut chosen = vec![0; axes.len()];
        for (slot, axis) in chosen.iter_mut().zip(&axes).rev() {
            *slot = code % axis.1.len();
            code /= axis.1.len();
        }
        cells.push(RunConfig::from_pairs(
            axes.iter().zip(&chosen).map(|((k, vals, line), &c)| (k.as_str(), vals[c].as_str(), *line)),
        )?);
    }
    Ok(cells)
}

/// Runs every cell × seed and returns one consolidated CSV: every config
/// column followed by the metrics columns.
pub fn run_ablation(grid: &str) -> Result<String> {
    let cells = expand_grid(grid)?;
    let jobs: Vec<(usize, RunConfig, TrainConfig)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.seeds.iter().map(move |&seed| (i, c.clone(), TrainConfig { seed, ..c.train.clone() })))
        .collect();
    let schemes = cells.iter().map(RunConfig::scheme_config).collect::<Result<Vec<_>>>()?;
    let runs = train::parallel_map(&jobs, |(i, cfg, t)| train::run_training(&cfg.env, &schemes[*i], t))?;

    let keys: Vec<&str> = cells[0].to_pairs().into_iter().map(|(k, _)| k).collect();
    let mut out = format!("{},{METRICS_HEADER}\n", keys.join(","));
    for ((_, cfg, _), run) in jobs.iter().zip(&runs) {
        let prefix: Vec<String> = cfg.to_pairs().into_iter().map(|(_, v)| v).collect();
        for row in train::metrics_rows(run) {
            writeln!(out, "{},{row}", prefix.join(",")).expect("write to String");
        }
    }
    Ok(out)
}
