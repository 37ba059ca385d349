use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};

use crate::distill::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;

/// Hyper-parameters handed to an update rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    /// 1-based step number, for bias correction.
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// An elementwise update rule with `slots` per-parameter state values.
pub trait OptimizerPlugin: Send + Sync {
    fn slots(&self) -> usize;
    /// Returns the new parameter value; `state` has `slots()` entries.
    fn update(&self, param: f64, grad: f64, state: &mut [f64], ctx: &StepContext) -> f64;
}

/// Decoupled weight decay followed by a bias-corrected Adam step.
pub struct AdamWRule;

impl OptimizerPlugin for AdamWRule {
    fn slots(&self) -> usize {
        2
    }

    fn update(&self, param: f64, grad: f64, state: &mut [f64], ctx: &StepContext) -> f64 {
        let m = ctx.beta1 * state[0] + (1.0 - ctx.beta1) * grad;
        let v = ctx.beta2 * state[1] + (1.0 - ctx.beta2) * grad * grad;
        state[0] = m;
        state[1] = v;
        let t = ctx.step as i32;
        let m_hat = m / (1.0 - ctx.beta1.powi(t));
        let v_hat = v / (1.0 - ctx.beta2.powi(t));
        let decayed = param * (1.0 - ctx.lr * ctx.weight_decay);
        decayed - ctx.lr * m_hat / (v_hat.sqrt() + ctx.eps)
    }
}

type Registry = RwLock<HashMap<String, Arc<dyn OptimizerPlugin>>>;

fn registry() -> &'static Registry {
    static REG: OnceLock<Registry> = OnceLock::new();
    REG.get_or_init(Default::default)
}

/// Makes an update rule available as `OptimizerKind::Plugin(name)`, e.g.
/// an AdEMAMix implementation.
pub fn register_optimizer(name: &str, plugin: Arc<dyn OptimizerPlugin>) {
    registry().write().unwrap().insert(name.to_string(), plugin);
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    #[serde(rename = "adamw")]
    AdamW,
    #[serde(untagged)]
    Plugin(String),
}

impl OptimizerKind {
    pub fn resolve(&self) -> Result<Arc<dyn OptimizerPlugin>> {
        match self {
            OptimizerKind::AdamW => Ok(Arc::new(AdamWRule)),
            OptimizerKind::Plugin(name) => registry()
                .read()
                .unwrap()
                .get(name)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("optimizer `{name}` is not registered"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::AdamW => f.write_str("adamw"),
            OptimizerKind::Plugin(n) => f.write_str(n),
        }
    }
}

/// Per-parameter optimizer state: the completed step count and one params
/// tree per state slot.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub slots: Vec<ModelParams<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>, slots: usize) -> Self {
        Self {
            step: 0,
            slots: (0..slots).map(|_| params.zeros_like()).collect(),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.slots.len() == other.slots.len()
            && self.slots.iter().zip(&other.slots).all(|(a, b)| a.bit_eq(b))
    }
}

/// Applies one update. A non-finite gradient aborts with `iter`.
pub fn optimizer_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut OptimizerState<T>,
    config: &TrainConfig,
    lr: f64,
    iter: u64,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    if !grads.is_finite() {
        return Err(Error::NanGradient { iter });
    }
    let rule = config.optimizer.resolve()?;
    if state.slots.len() != rule.slots() {
        return Err(Error::Mismatch(format!(
            "optimizer state has {} slots, {} expects {}",
            state.slots.len(),
            config.optimizer,
            rule.slots()
        )));
    }
    let ctx = StepContext {
        step: state.step + 1,
        lr,
        weight_decay: config.weight_decay,
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.adam_eps,
    };
    let mut ps = params.tensors_mut();
    let gs = grads.tensors();
    if ps.len() != gs.len() {
        return Err(Error::shape("optimizer_step", "gradient tree layout differs"));
    }
    let mut slot_tensors: Vec<Vec<_>> = state.slots.iter_mut().map(|s| s.tensors_mut()).collect();
    let mut buf = vec![0.0; rule.slots()];
    for (ti, (p, (_, g))) in ps.iter_mut().zip(&gs).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape("optimizer_step", format!("{:?} vs {:?}", p.shape(), g.shape())));
        }
        for e in 0..p.len() {
            for (s, slot) in slot_tensors.iter().enumerate() {
                buf[s] = slot[ti].data()[e].as_f64();
            }
            let new = rule.update(p.data()[e].as_f64(), g.data()[e].as_f64(), &mut buf, &ctx);
            p.data_mut()[e] = T::of(new);
            for (s, slot) in slot_tensors.iter_mut().enumerate() {
                slot[ti].data_mut()[e] = T::of(buf[s]);
            }
        }
    }
    state.step += 1;
    Ok(())
}
