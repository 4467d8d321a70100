//! Optimizers and gradient bookkeeping keyed by parameter name.

use autodiff::{Gradients, Tensor};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

/// Accumulated gradients by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap(pub IndexMap<String, Tensor>);

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `scale *` every named gradient of a backward pass.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (name, g) in grads.params() {
            let mut g = g.clone();
            if scale != 1.0 {
                g.scale_assign(scale);
            }
            match self.0.get_mut(name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.0.insert(name.to_string(), g);
                }
            }
        }
    }

    pub fn merge(&mut self, other: GradMap) {
        for (name, g) in other.0 {
            match self.0.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.0.insert(name, g);
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.0.values_mut() {
            g.scale_assign(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(Tensor::all_finite)
    }

    /// Entries whose name starts with any of `prefixes`.
    pub fn select(&self, prefixes: &[&str]) -> GradMap {
        GradMap(
            self.0
                .iter()
                .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
                .map(|(n, g)| (n.clone(), g.clone()))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping and the factor applied.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> (f64, f64) {
    let norm = grads.global_norm();
    let factor = if norm > max_norm { max_norm / norm } else { 1.0 };
    if factor != 1.0 {
        grads.scale(factor);
    }
    (norm, factor)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    AdamW {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::AdamW { lr, .. } => lr,
        }
    }

    pub fn adamw(lr: f64) -> Self {
        OptimizerConfig::AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Momentum SGD with coupled weight decay, or AdamW with decoupled decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    pub steps: u64,
    /// Velocity (SGD) or first moment (AdamW).
    pub first: IndexMap<String, Tensor>,
    /// Second moment (AdamW only).
    pub second: IndexMap<String, Tensor>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            steps: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient in `grads`.
    /// `lr_scale` multiplies the configured learning rate.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap, lr_scale: f64) {
        self.step_stores(&mut [params], grads, lr_scale);
    }

    /// One update across parameters spread over several stores.
    pub fn step_stores(&mut self, stores: &mut [&mut ParamStore], grads: &GradMap, lr_scale: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        for (name, g) in &grads.0 {
            let Some(p) = stores.iter_mut().find_map(|s| s.get_mut(name)) else { continue };
            match self.cfg {
                OptimizerConfig::Sgd {
                    lr,
                    momentum,
                    weight_decay,
                } => {
                    let lr = lr * lr_scale;
                    let v = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        let d = gv + weight_decay * *pv;
                        *vv = momentum * *vv + d;
                        *pv -= lr * *vv;
                    }
                }
                OptimizerConfig::AdamW {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let lr = lr * lr_scale;
                    let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((pv, mv), vv), gv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let upd = (*mv / c1) / ((*vv / c2).sqrt() + eps);
                        *pv -= lr * (upd + weight_decay * *pv);
                    }
                }
            }
        }
    }

    /// Named state tensors for checkpointing.
    pub fn state(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (n, t) in &self.first {
            out.push((format!("{prefix}/m1/{n}"), t.clone()));
        }
        for (n, t) in &self.second {
            out.push((format!("{prefix}/m2/{n}"), t.clone()));
        }
        out
    }

    /// Restores state written by [`Optimizer::state`].
    pub fn load_state(&mut self, prefix: &str, entries: &IndexMap<String, Tensor>, steps: u64) {
        self.steps = steps;
        self.first.clear();
        self.second.clear();
        let m1 = format!("{prefix}/m1/");
        let m2 = format!("{prefix}/m2/");
        for (n, t) in entries {
            if let Some(rest) = n.strip_prefix(&m1) {
                self.first.insert(rest.to_string(), t.clone());
            } else if let Some(rest) = n.strip_prefix(&m2) {
                self.second.insert(rest.to_string(), t.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_to_half_at_norm_thirty() {
        let mut g = GradMap::new();
        g.0.insert("a".into(), Tensor::new(&[2], vec![18.0, 24.0]));
        let (norm, factor) = clip_global_norm(&mut g, 15.0);
        assert_eq!(norm, 30.0);
        assert_eq!(factor, 0.5);
        assert_eq!(g.get("a").unwrap().data(), &[9.0, 12.0]);
        let (_, f) = clip_global_norm(&mut g, 15.0);
        assert_eq!(f, 1.0);
    }

    #[test]
    fn sgd_momentum_with_coupled_decay() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[1], vec![1.0]));
        let mut g = GradMap::new();
        g.0.insert("w".into(), Tensor::new(&[1], vec![0.5]));
        let mut o = Optimizer::new(OptimizerConfig::Sgd {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.1,
        });
        o.step(&mut p, &g, 1.0);
        // v = 0.5 + 0.1 = 0.6; w = 1 - 0.06
        assert!((p.get("w").data()[0] - 0.94).abs() < 1e-15);
        o.step(&mut p, &g, 1.0);
        // v = 0.9*0.6 + 0.5 + 0.094 = 1.134
        assert!((p.get("w").data()[0] - (0.94 - 0.1134)).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[2], vec![1.0, -1.0]));
        let mut g = GradMap::new();
        g.0.insert("w".into(), Tensor::new(&[2], vec![3.0, -0.2]));
        let mut o = Optimizer::new(OptimizerConfig::adamw(0.01));
        o.step(&mut p, &g, 1.0);
        let w = p.get("w").data();
        assert!((w[0] - 0.99).abs() < 1e-8 && (w[1] + 0.99).abs() < 1e-8);
    }
}
