use std::fmt;
use std::str::FromStr;

use crate::autodiff::{global_norm, sgd_step};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Gradient-descent state shared by every parameter of one model.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam { m: Vec<Matrix>, v: Vec<Matrix>, t: u64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[Matrix]) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => {
                let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
                Optimizer::Adam { m: zeros.clone(), v: zeros, t: 0 }
            }
        }
    }

    /// One descent step after global-norm clipping; returns the pre-clip norm.
    /// A zero learning rate leaves `params` bit-identical.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64, clip: Option<f64>) -> Result<f64> {
        let (m, v, t) = match self {
            Optimizer::Sgd => return sgd_step(params, grads, lr, clip),
            Optimizer::Adam { m, v, t } => (m, v, t),
        };
        if params.len() != grads.len() || params.len() != m.len() {
            return Err(Error::Contract(format!("{} params, {} grads, {} moments", params.len(), grads.len(), m.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Dimension { op: "adam_step", left: p.shape(), right: g.shape() });
            }
        }
        let norm = global_norm(grads);
        if lr == 0.0 {
            return Ok(norm);
        }
        let factor = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        *t += 1;
        let bc1 = 1.0 - BETA1.powi(*t as i32);
        let bc2 = 1.0 - BETA2.powi(*t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
            {
                let gv = gv * factor;
                *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
                *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
                *pv -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + EPS);
            }
        }
        Ok(norm)
    }
}
