//! Adadelta.

use crate::error::{Error, Result};
use crate::nn::ParamRegistry;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub epsilon: f64,
    pub lr: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        Self {
            rho: 0.95,
            epsilon: 1e-6,
            lr: 1.0,
        }
    }
}

/// Running averages `E[g²]` and `E[Δx²]` for every parameter of one
/// registry, in registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdadeltaState {
    pub config: AdadeltaConfig,
    names: Vec<String>,
    sq_grad: Vec<Vec<f64>>,
    sq_delta: Vec<Vec<f64>>,
}

impl AdadeltaState {
    pub fn new(params: &ParamRegistry, config: AdadeltaConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            names: params.names().to_vec(),
            sq_grad: zeros(),
            sq_delta: zeros(),
        }
    }

    /// Rebuilds a state from stored accumulators (checkpoint restore).
    pub fn from_parts(
        config: AdadeltaConfig,
        names: Vec<String>,
        sq_grad: Vec<Vec<f64>>,
        sq_delta: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if names.len() != sq_grad.len() || names.len() != sq_delta.len() {
            return Err(Error::Format("optimizer state has inconsistent lengths".into()));
        }
        if sq_grad.iter().chain(&sq_delta).flatten().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::Format("optimizer accumulators must be non-negative".into()));
        }
        Ok(Self {
            config,
            names,
            sq_grad,
            sq_delta,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn sq_grad(&self) -> &[Vec<f64>] {
        &self.sq_grad
    }

    pub fn sq_delta(&self) -> &[Vec<f64>] {
        &self.sq_delta
    }

    fn check_keys(&self, params: &ParamRegistry) -> Result<()> {
        if self.names.as_slice() != params.names() {
            return Err(Error::contract("optimizer state keys differ from parameter registry"));
        }
        for (i, (_, t)) in params.iter().enumerate() {
            if self.sq_grad[i].len() != t.numel() {
                return Err(Error::contract(format!(
                    "optimizer state for `{}` has the wrong length",
                    self.names[i]
                )));
            }
        }
        Ok(())
    }

    /// One Adadelta update of every trainable parameter, consuming its
    /// gradient. Frozen parameters are skipped.
    pub fn step(&mut self, params: &mut ParamRegistry) -> Result<()> {
        self.check_keys(params)?;
        let AdadeltaConfig { rho, epsilon, lr } = self.config;
        // validate everything before touching any parameter
        for (name, t) in params.iter() {
            if !t.requires_grad() {
                continue;
            }
            let g = t
                .grad()
                .ok_or_else(|| Error::contract(format!("parameter `{name}` has no gradient")))?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    op: format!("gradient of `{name}`"),
                });
            }
        }
        for (i, (_, t)) in params.iter_mut().enumerate() {
            if !t.requires_grad() {
                continue;
            }
            let g = t.take_grad().expect("checked above");
            let (eg, ed) = (&mut self.sq_grad[i], &mut self.sq_delta[i]);
            let x = t.data_mut();
            for j in 0..g.len() {
                eg[j] = rho * eg[j] + (1.0 - rho) * g[j] * g[j];
                let dx = -((ed[j] + epsilon).sqrt() / (eg[j] + epsilon).sqrt()) * g[j];
                ed[j] = rho * ed[j] + (1.0 - rho) * dx * dx;
                x[j] += lr * dx;
            }
        }
        Ok(())
    }
}
