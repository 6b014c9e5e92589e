//! Optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph};
use crate::params::{FreezeSet, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr0 * (1 - step / total_steps)`, clamped at zero.
    LinearToZero { total_steps: usize },
    /// `lr0 / gamma^epoch`.
    Anneal { gamma: f64 },
}

impl LrSchedule {
    pub fn rate(&self, lr0: f64, step: usize, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => lr0,
            LrSchedule::LinearToZero { total_steps } => {
                lr0 * (1.0 - step as f64 / total_steps.max(1) as f64).max(0.0)
            }
            LrSchedule::Anneal { gamma } => lr0 / gamma.powi(epoch as i32),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Summed gradients for one parameter store.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    store: u64,
    grads: Vec<Option<Tensor>>,
}

impl GradBuffer {
    pub fn for_store(store: &ParamStore) -> Self {
        Self { store: store.uid(), grads: vec![None; store.len()] }
    }

    /// Adds `scale *` the gradients this graph produced for the store.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients, scale: f64) {
        for (key, g) in graph.param_grads(grads) {
            if key.store != self.store {
                continue;
            }
            match &mut self.grads[key.index] {
                Some(t) => t.add_scaled(&g, scale),
                slot @ None => {
                    let mut g = g;
                    g.scale(scale);
                    *slot = Some(g);
                }
            }
        }
    }

    pub fn get(&self, index: usize) -> Option<&Tensor> {
        self.grads[index].as_ref()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn clip_to(&mut self, max_norm: f64) {
        let n = self.global_norm();
        if max_norm > 0.0 && n > max_norm {
            let s = max_norm / n;
            self.grads.iter_mut().flatten().for_each(|t| t.scale(s));
        }
    }
}

/// Adam (or plain SGD) over a single parameter store. State for parameters
/// in frozen groups is never created or touched.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: Vec<u32>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        let n = store.len();
        Self { kind, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![None; n], v: vec![None; n], t: vec![0; n] }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64, frozen: &FreezeSet) {
        assert_eq!(grads.store, store.uid(), "gradients belong to another store");
        for i in 0..store.len() {
            if frozen.contains(store.get(i).group) {
                continue;
            }
            let Some(g) = grads.get(i) else { continue };
            match self.kind {
                OptimizerKind::Sgd => store.value_mut(i).add_scaled(g, -lr),
                OptimizerKind::Adam => {
                    self.t[i] += 1;
                    let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let (b1, b2) = (self.beta1, self.beta2);
                    let c1 = 1.0 - b1.powi(self.t[i] as i32);
                    let c2 = 1.0 - b2.powi(self.t[i] as i32);
                    let p = store.value_mut(i).data_mut();
                    for (((pj, gj), mj), vj) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                        *mj = b1 * *mj + (1.0 - b1) * gj;
                        *vj = b2 * *vj + (1.0 - b2) * gj * gj;
                        *pj -= lr * (*mj / c1) / ((*vj / c2).sqrt() + self.eps);
                    }
                }
            }
        }
    }

    /// Whether any optimizer state exists for parameter `index`.
    pub fn has_state(&self, index: usize) -> bool {
        self.m[index].is_some() || self.t[index] > 0
    }
}
