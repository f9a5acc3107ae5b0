use serde::{Deserialize, Serialize};

use super::{sgd_step, Params, QNetError, QNetwork, Result};

/// Update rule applied after each gradient computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Momentum {
        #[serde(default = "default_beta1")]
        beta: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::adam()
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        let ok = match *self {
            OptimizerKind::Sgd => true,
            OptimizerKind::Momentum { beta } => unit(beta),
            OptimizerKind::Adam { beta1, beta2, eps } => unit(beta1) && unit(beta2) && eps > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(QNetError::InvalidConfig(format!("bad optimizer settings {self:?}")))
        }
    }
}

/// Optimizer with its running state. Moments are kept in f64.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        kind.validate()?;
        if !(lr > 0.0) {
            return Err(QNetError::InvalidArgument(format!("lr {lr} must be > 0")));
        }
        Ok(Self {
            kind,
            lr,
            m: vec![],
            v: vec![],
            t: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&mut self, net: &mut QNetwork, grads: &Params) -> Result<()> {
        if grads.len() != net.params().len() || grads.precision() != net.params().precision() {
            return Err(QNetError::LayoutMismatch);
        }
        if self.m.is_empty() {
            self.m = vec![0.0; grads.len()];
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.v = vec![0.0; grads.len()];
            }
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => sgd_step(net, grads, self.lr),
            OptimizerKind::Momentum { beta } => {
                let mut dir = grads.zeros_like();
                for i in 0..grads.len() {
                    self.m[i] = beta * self.m[i] + grads.get(i);
                    dir.set(i, self.m[i]);
                }
                sgd_step(net, &dir, self.lr)
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t.min(i32::MAX as u64) as i32);
                let c2 = 1.0 - beta2.powi(self.t.min(i32::MAX as u64) as i32);
                let mut dir = grads.zeros_like();
                for i in 0..grads.len() {
                    let g = grads.get(i);
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    dir.set(i, mh / (vh.sqrt() + eps));
                }
                sgd_step(net, &dir, self.lr)
            }
        }
    }
}
