use serde::{Deserialize, Serialize};

use super::{Layer, Param};

/// Step size for a 1-based `epoch`: `lr0` scaled by `factor` once for every
/// decay epoch that has already finished.
pub fn learning_rate(lr0: f64, factor: f64, decay_epochs: &[usize], epoch: usize) -> f64 {
    let decays = decay_epochs.iter().filter(|&&d| d < epoch).count();
    lr0 * factor.powi(decays as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Applies parameter updates in the order the model visits its parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            moments: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, model: &mut dyn Layer, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let kind = self.kind;
        let moments = &mut self.moments;
        let mut index = 0;
        model.visit_params(&mut |p: &mut Param| {
            match kind {
                OptimizerKind::Sgd => {
                    for (v, g) in p.value.iter_mut().zip(&p.grad) {
                        *v -= lr * g;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    if moments.len() <= index {
                        moments.push((vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
                    }
                    let (m, s) = &mut moments[index];
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..p.value.len() {
                        let g = p.grad[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        s[i] = beta2 * s[i] + (1.0 - beta2) * g * g;
                        p.value[i] -= lr * (m[i] / c1) / ((s[i] / c2).sqrt() + eps);
                    }
                }
            }
            index += 1;
        });
    }
}
