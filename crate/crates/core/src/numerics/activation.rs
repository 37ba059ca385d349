//! Elementwise MLP activations.
//!
//! `silu` and `squared_relu` are built in. Any other name resolves through a
//! process-wide registry so that externally defined activations (xIELU, for
//! instance) can be plugged in without touching the model code.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A user-supplied activation. Evaluated in `f64` and cast back.
pub trait ActivationPlugin: Send + Sync {
    fn value(&self, x: f64) -> f64;
    fn derivative(&self, x: f64) -> f64;
}

fn registry() -> &'static RwLock<HashMap<String, Arc<dyn ActivationPlugin>>> {
    static REGISTRY: OnceLock<RwLock<HashMap<String, Arc<dyn ActivationPlugin>>>> =
        OnceLock::new();
    REGISTRY.get_or_init(Default::default)
}

/// Registers (or replaces) a named activation.
pub fn register_activation(name: &str, plugin: Arc<dyn ActivationPlugin>) {
    registry()
        .write()
        .expect("activation registry poisoned")
        .insert(name.to_string(), plugin);
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Silu,
    SquaredRelu,
    /// Resolved through [`register_activation`]; `"xielu"` is the slot the
    /// reference architecture uses.
    #[serde(untagged)]
    Plugin(String),
}

impl Default for ActivationKind {
    fn default() -> Self {
        ActivationKind::Silu
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationKind::Silu => f.write_str("silu"),
            ActivationKind::SquaredRelu => f.write_str("squared_relu"),
            ActivationKind::Plugin(name) => f.write_str(name),
        }
    }
}

/// A resolved activation ready for evaluation.
#[derive(Clone)]
pub enum Activation {
    Silu,
    SquaredRelu,
    Plugin(Arc<dyn ActivationPlugin>),
}

impl fmt::Debug for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Silu => f.write_str("Silu"),
            Activation::SquaredRelu => f.write_str("SquaredRelu"),
            Activation::Plugin(_) => f.write_str("Plugin"),
        }
    }
}

impl ActivationKind {
    pub fn resolve(&self) -> Result<Activation> {
        match self {
            ActivationKind::Silu => Ok(Activation::Silu),
            ActivationKind::SquaredRelu => Ok(Activation::SquaredRelu),
            ActivationKind::Plugin(name) => registry()
                .read()
                .expect("activation registry poisoned")
                .get(name)
                .cloned()
                .map(Activation::Plugin)
                .ok_or_else(|| Error::UnknownActivation(name.clone())),
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    pub fn value<T: Scalar>(&self, x: T) -> T {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::SquaredRelu => {
                let r = x.max(T::zero());
                r * r
            }
            Activation::Plugin(p) => T::of(p.value(x.as_f64())),
        }
    }

    pub fn derivative<T: Scalar>(&self, x: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::SquaredRelu => T::of(2.0) * x.max(T::zero()),
            Activation::Plugin(p) => T::of(p.derivative(x.as_f64())),
        }
    }
}

/// Applies `kind` elementwise.
pub fn activation_apply<T: Scalar>(
    kind: &ActivationKind,
    x: &crate::numerics::Tensor<T>,
) -> Result<crate::numerics::Tensor<T>> {
    let act = kind.resolve()?;
    Ok(x.map(|v| act.value(v)))
}
