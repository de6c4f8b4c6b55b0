use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::supernet::{ParamId, Supernet};

/// `base · (1 + cos(π·step/total)) / 2`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (PI * t).cos())
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
///
/// Parameters without a gradient are skipped, buffers included.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub buffers: BTreeMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            buffers: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, net: &mut Supernet, lr: f64) {
        for (id, t) in net.params_mut() {
            let Some(g) = t.grad.take() else { continue };
            let v = self.buffers.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            for ((v, g), p) in v.iter_mut().zip(&g).zip(t.data_mut()) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        net.enforce_floors();
    }
}
