//! Parameter updates.

use crate::autodiff::{GradStore, ParamRegistry};
use crate::config::OptimizerKind;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        step: i32,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamRegistry) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                step: 0,
                m: params.iter().map(|(_, _, p)| vec![0.0; p.data.len()]).collect(),
                v: params.iter().map(|(_, _, p)| vec![0.0; p.data.len()]).collect(),
            },
        }
    }

    /// Applies one update. Parameters without a gradient in `grads` are
    /// left alone, moments included.
    pub fn step(&mut self, params: &mut ParamRegistry, grads: &GradStore) {
        match self {
            Optimizer::Sgd { lr } => {
                for (id, g) in grads.iter() {
                    for (p, g) in params.get_mut(id).data.iter_mut().zip(g) {
                        *p -= *lr * g;
                    }
                }
            }
            Optimizer::Adam { lr, step, m, v } => {
                *step += 1;
                let c1 = 1.0 - BETA1.powi(*step);
                let c2 = 1.0 - BETA2.powi(*step);
                for (id, g) in grads.iter() {
                    let (m, v) = (&mut m[id.index()], &mut v[id.index()]);
                    let data = &mut params.get_mut(id).data;
                    for k in 0..g.len() {
                        m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
                        v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        data[k] -= *lr * mh / (vh.sqrt() + EPSILON);
                    }
                }
            }
        }
    }
}
