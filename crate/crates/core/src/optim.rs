//! AdamW with separate learning rates for the encoder body and the
//! classification head.

use crate::encoder::{Encoder, ParamGroup};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr_body: f64,
    pub lr_classifier: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only (not to biases or norm gains).
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr_body: 1e-3,
            lr_classifier: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: Some(1.0),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr_body", self.lr_body), ("lr_classifier", self.lr_classifier), ("eps", self.eps)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} = {v} must be positive")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} = {v} must lie in [0, 1)")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be >= 0"));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::invalid("max_grad_norm must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, model: &Encoder) -> Result<Self> {
        config.validate()?;
        if model.is_frozen() {
            return Err(Error::State("cannot optimize a frozen encoder".into()));
        }
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Ok(AdamW {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update using the gradients accumulated on `g` for the
    /// vars returned by `model.bind(g)`. Parameters that received no gradient
    /// are treated as having a zero gradient.
    pub fn step(&mut self, model: &mut Encoder, g: &Graph, vars: &[Var]) -> Result<()> {
        if model.is_frozen() {
            return Err(Error::State("cannot optimize a frozen encoder".into()));
        }
        if vars.len() != self.m.len() {
            return Err(Error::dim(format!(
                "{} vars bound, optimizer tracks {} parameters",
                vars.len(),
                self.m.len()
            )));
        }
        let grads: Vec<Option<&[f64]>> = vars.iter().map(|&v| g.grad(v)).collect();
        let mut scale = 1.0;
        if let Some(clip) = self.config.max_grad_norm {
            let norm = grads
                .iter()
                .flatten()
                .flat_map(|gr| gr.iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::Numeric(format!("gradient norm is {norm}")));
            }
            if norm > clip {
                scale = clip / norm;
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, param) in model.params_mut().iter_mut().enumerate() {
            let lr = match param.group {
                ParamGroup::Body => c.lr_body,
                ParamGroup::Classifier => c.lr_classifier,
            };
            let decay = if param.value.ndim() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = param.value.data_mut();
            for j in 0..data.len() {
                let gj = grads[i].map_or(0.0, |gr| gr[j] * scale);
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * data[j]);
            }
        }
        Ok(())
    }
}
