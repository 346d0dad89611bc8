//! Momentum SGD and Adam over a [`ParamStore`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    MomentumSgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Momentum for SGD, β1 for Adam.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::MomentumSgd,
            momentum,
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay,
        }
    }

    pub fn adam(weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            momentum: default_momentum(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.momentum) || !unit(self.beta2) {
            return config_err("momentum and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return config_err("eps must be > 0 and weight_decay >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Optimizer state: per-parameter moment buffers and the step count.
#[derive(Clone, Debug)]
pub struct Optimizer<T: Real = f32> {
    pub config: OptimizerConfig,
    state: BTreeMap<ParamId, Moments<T>>,
    steps: u64,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: BTreeMap::new(),
            steps: 0,
        })
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update with learning rate `lr`. A zero rate leaves every
    /// parameter and buffer untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if store.value(*id).numel() != g.len() {
                return dim_err(format!(
                    "gradient of length {} for parameter {} of shape {:?}",
                    g.len(),
                    store.get(*id).name,
                    store.value(*id).shape()
                ));
            }
        }
        self.steps += 1;
        if lr == 0.0 {
            return Ok(());
        }
        let c = &self.config;
        let wd = T::from_f64(c.weight_decay);
        let lr_t = T::from_f64(lr);
        let mu = T::from_f64(c.momentum);
        let (b1, b2) = (T::from_f64(c.momentum), T::from_f64(c.beta2));
        let eps = T::from_f64(c.eps);
        let t = self.steps as i32;
        let bc1 = T::from_f64(1.0 - c.momentum.powi(t));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t));
        for (id, g) in grads {
            let p = store.value_mut(*id).data_mut();
            let st = self.state.entry(*id).or_insert_with(|| Moments {
                m: vec![T::zero(); g.len()],
                v: if c.kind == OptimizerKind::Adam { vec![T::zero(); g.len()] } else { Vec::new() },
            });
            match c.kind {
                OptimizerKind::MomentumSgd => {
                    for ((p, &g), m) in p.iter_mut().zip(g).zip(st.m.iter_mut()) {
                        let g = g + wd * *p;
                        *m = mu * *m + g;
                        *p -= lr_t * *m;
                    }
                }
                OptimizerKind::Adam => {
                    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(st.m.iter_mut()).zip(st.v.iter_mut()) {
                        let g = g + wd * *p;
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *p -= lr_t * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
