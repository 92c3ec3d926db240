//! Adam with decoupled weight decay and a warmup/linear-decay schedule.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 100,
            total_steps: 1000,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err("eps must be positive and weight_decay non-negative".into());
        }
        if self.warmup_steps > self.total_steps {
            return Err(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        Ok(())
    }

    /// Learning rate for update number `t` (1-based): linear ramp to `lr`
    /// over the warmup, then linear decay reaching 0 at `total_steps`.
    pub fn lr_at(&self, t: u64) -> f64 {
        let (w, n) = (self.warmup_steps, self.total_steps);
        if t <= w {
            self.lr * t as f64 / w as f64
        } else if t >= n {
            0.0
        } else {
            self.lr * (n - t) as f64 / (n - w) as f64
        }
    }
}

/// Moment estimates, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, p)| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn is_fresh(&self) -> bool {
        self.t == 0
    }

    /// One update from the gradients held in `store`. Parameters without a
    /// gradient are treated as having a zero gradient. Returns the learning
    /// rate used.
    pub fn step(&mut self, store: &mut ParamStore, config: &OptimConfig) -> Result<f64> {
        if self.m.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        let t = self.t + 1;
        let lr = config.lr_at(t);
        let c1 = 1.0 - config.beta1.powi(t as i32);
        let c2 = 1.0 - config.beta2.powi(t as i32);
        let ids: Vec<_> = store.ids().collect();
        let mut updated = Vec::with_capacity(ids.len());
        for (k, &id) in ids.iter().enumerate() {
            let p = store.get(id);
            let decay = if store.decays(id) { config.weight_decay } else { 0.0 };
            let grad = p.grad();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let mut next = p.data().to_vec();
            for i in 0..next.len() {
                let gi = grad.map_or(0.0, |g| g[i]);
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                next[i] -= lr * (mh / (vh.sqrt() + config.eps) + decay * next[i]);
            }
            if next.iter().any(|x| !x.is_finite()) {
                return Err(Error::Diverged {
                    step: t,
                    detail: format!("non-finite update for {}", store.name(id)),
                });
            }
            updated.push(next);
        }
        for (id, next) in ids.into_iter().zip(updated) {
            store.get_mut(id).data_mut().copy_from_slice(&next);
        }
        self.t = t;
        Ok(lr)
    }
}
