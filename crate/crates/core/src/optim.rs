//! Adam and SGD over the trainable entries of a parameter set.
//!
//! Weight decay is added to the gradient (L2 style). Parameters whose
//! `trainable` flag is off are never touched.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    step: i32,
    moments: HashMap<String, (Array2<f64>, Array2<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Optimizer { kind, lr, weight_decay, step: 0, moments: HashMap::new() }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.step += 1;
        let t = self.step;
        for p in params.iter_mut().filter(|p| p.trainable) {
            let Some(g) = grads.get(&p.name) else { continue };
            let mut g = g.clone();
            if self.weight_decay != 0.0 {
                g.scaled_add(self.weight_decay, &p.value);
            }
            match self.kind {
                OptimizerKind::Sgd => p.value.scaled_add(-self.lr, &g),
                OptimizerKind::Adam => {
                    let (m, v) = self
                        .moments
                        .entry(p.name.clone())
                        .or_insert_with(|| (Array2::zeros(g.raw_dim()), Array2::zeros(g.raw_dim())));
                    m.zip_mut_with(&g, |m, &gi| *m = BETA1 * *m + (1.0 - BETA1) * gi);
                    v.zip_mut_with(&g, |v, &gi| *v = BETA2 * *v + (1.0 - BETA2) * gi * gi);
                    let bc1 = 1.0 - BETA1.powi(t);
                    let bc2 = 1.0 - BETA2.powi(t);
                    let lr = self.lr;
                    ndarray::Zip::from(&mut p.value).and(&*m).and(&*v).for_each(|w, &mi, &vi| {
                        *w -= lr * (mi / bc1) / ((vi / bc2).sqrt() + EPS);
                    });
                }
            }
        }
    }
}
