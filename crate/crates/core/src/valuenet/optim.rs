use serde::{Deserialize, Serialize};

use super::mlp::{Gradients, Mlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(AdamState),
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self::Sgd { lr }
    }

    /// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn adam(lr: f64, net: &Mlp) -> Self {
        let n = net.n_params();
        Self::Adam(AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, steps: 0, m: vec![0.0; n], v: vec![0.0; n] })
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            Self::Sgd { lr } => *lr,
            Self::Adam(s) => s.lr,
        }
    }

    /// Applies one descent step with the accumulated gradients.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        match self {
            Self::Sgd { lr } => {
                for (layer, g) in net.layers_mut().iter_mut().zip(&grads.layers) {
                    for (p, d) in layer.weights.iter_mut().zip(&g.weights).chain(layer.biases.iter_mut().zip(&g.biases)) {
                        *p -= *lr * d;
                    }
                }
            }
            Self::Adam(s) => {
                s.steps += 1;
                let t = s.steps as i32;
                let c1 = 1.0 - s.beta1.powi(t);
                let c2 = 1.0 - s.beta2.powi(t);
                let step = s.lr * c2.sqrt() / c1;
                let eps_hat = s.eps * c2.sqrt();
                let mut k = 0;
                for (layer, g) in net.layers_mut().iter_mut().zip(&grads.layers) {
                    for (p, d) in layer.weights.iter_mut().zip(&g.weights).chain(layer.biases.iter_mut().zip(&g.biases)) {
                        let m = &mut s.m[k];
                        let v = &mut s.v[k];
                        *m = s.beta1 * *m + (1.0 - s.beta1) * d;
                        *v = s.beta2 * *v + (1.0 - s.beta2) * d * d;
                        *p -= step * *m / (v.sqrt() + eps_hat);
                        k += 1;
                    }
                }
            }
        }
    }
}
