use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adaptive-moment state; for SGD the moment buffers stay zero.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub kind: OptimizerKind,
}

impl AdamState {
    pub fn new(store: &ParamStore, kind: OptimizerKind) -> Self {
        let m = store
            .iter()
            .map(|p| vec![0.0; p.tensor().data().len()])
            .collect::<Vec<_>>();
        let v = m.clone();
        Self { m, v, step: 0, kind }
    }

    /// One optimizer step. Parameters whose gradient entry is `None` are
    /// treated as zero-gradient; with zero moments their update is exactly
    /// zero, which keeps untouched parameters bitwise unchanged.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (i, grad) in grads.iter().enumerate() {
                    let Some(g) = grad else { continue };
                    let delta: Vec<f64> = g.iter().map(|gi| -lr * gi).collect();
                    store.by_index_mut(i).apply_update(&delta);
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - BETA1.powi(self.step as i32);
                let bc2 = 1.0 - BETA2.powi(self.step as i32);
                for i in 0..self.m.len() {
                    let zero;
                    let g: &[f64] = match &grads[i] {
                        Some(g) => g,
                        None => {
                            // Zero gradient: moments decay but a zero moment
                            // stays zero, so skip the whole-buffer walk only
                            // when it is already all zero.
                            if self.m[i].iter().all(|&x| x == 0.0)
                                && self.v[i].iter().all(|&x| x == 0.0)
                            {
                                continue;
                            }
                            zero = vec![0.0; self.m[i].len()];
                            &zero
                        }
                    };
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    let mut delta = vec![0.0; g.len()];
                    for j in 0..g.len() {
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        delta[j] = -lr * mh / (vh.sqrt() + EPS);
                    }
                    store.by_index_mut(i).apply_update(&delta);
                }
            }
        }
    }
}
