//! AdamW with decoupled weight decay and exportable moments.

use std::collections::BTreeMap;

use candle::backprop::GradStore;
use candle::Tensor;

use crate::model::ParamStore;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Whether weight decay applies to a parameter: matrices and convolution
/// kernels only, never biases, norms, prompts, logit scales or position-bias
/// tables.
pub fn decays(name: &str, rank: usize) -> bool {
    rank >= 2 && !name.ends_with("rpb_table") && !name.ends_with("logit_scale")
}

pub struct AdamW {
    pub params: AdamWParams,
    /// Number of updates applied so far.
    pub steps: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(params: AdamWParams) -> Self {
        Self {
            params,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update with learning rate `lr`. Parameters without a gradient are
    /// left untouched.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let AdamWParams {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.params;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for (name, var) in store.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients can still reference the forward graph
            let g = &g.detach();
            let m = match self.m.get(name) {
                Some(m) => ((m * beta1)? + (g * (1.0 - beta1))?)?,
                None => (g * (1.0 - beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + eps)?;
            let update = ((&m / bc1)? / denom)?;
            let mut p = var.as_tensor().detach();
            if weight_decay > 0.0 && decays(name, var.rank()) {
                p = (p * (1.0 - lr * weight_decay))?;
            }
            var.set(&(p - (update * lr)?)?)?;
            self.m.insert(name.to_string(), m);
            self.v.insert(name.to_string(), v);
        }
        Ok(())
    }

    /// Moment tensors keyed `optim.m.<param>` and `optim.v.<param>`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("optim.m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("optim.v.{k}"), t.clone());
        }
        out
    }

    /// Restores moments from checkpoint tensors; other names are ignored.
    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, steps: usize) {
        self.steps = steps;
        self.m.clear();
        self.v.clear();
        for (k, t) in tensors {
            if let Some(p) = k.strip_prefix("optim.m.") {
                self.m.insert(p.to_string(), t.clone());
            } else if let Some(p) = k.strip_prefix("optim.v.") {
                self.v.insert(p.to_string(), t.clone());
            }
        }
    }
}
