use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph};

/// Optimizer choice, defaulting to Keras' RMSprop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Rmsprop { rho: f32, epsilon: f32 },
    Adam { beta_1: f32, beta_2: f32, epsilon: f32 },
    Sgd { momentum: f32 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Rmsprop {
            rho: 0.9,
            epsilon: 1e-7,
        }
    }
}

pub struct Optimizer {
    config: OptimizerConfig,
    learning_rate: f32,
    steps: u64,
    // per group, per tensor
    first: Vec<Vec<Vec<f32>>>,
    second: Vec<Vec<Vec<f32>>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, learning_rate: f32) -> Self {
        Optimizer {
            config,
            learning_rate,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every tensor that received a gradient.
    pub fn step(&mut self, graph: &mut Graph, grads: &Gradients) {
        self.steps += 1;
        let t = self.steps as i32;
        let lr = self.learning_rate;
        if self.first.len() < graph.groups().len() {
            self.first.resize(graph.groups().len(), Vec::new());
            self.second.resize(graph.groups().len(), Vec::new());
        }
        for (gi, group) in graph.groups_mut().iter_mut().enumerate() {
            let Some(tensor_grads) = &grads.params[gi] else {
                continue;
            };
            if self.first[gi].is_empty() {
                self.first[gi] = group.tensors.iter().map(|p| vec![0.0; p.data.len()]).collect();
                self.second[gi] = group.tensors.iter().map(|p| vec![0.0; p.data.len()]).collect();
            }
            for (ti, (param, grad)) in group.tensors.iter_mut().zip(tensor_grads).enumerate() {
                let Some(grad) = grad else { continue };
                if !param.trainable {
                    continue;
                }
                let m = &mut self.first[gi][ti];
                let v = &mut self.second[gi][ti];
                match self.config {
                    OptimizerConfig::Rmsprop { rho, epsilon } => {
                        for ((p, g), acc) in param.data.iter_mut().zip(grad).zip(v.iter_mut()) {
                            *acc = rho * *acc + (1.0 - rho) * g * g;
                            *p -= lr * g / (acc.sqrt() + epsilon);
                        }
                    }
                    OptimizerConfig::Adam {
                        beta_1,
                        beta_2,
                        epsilon,
                    } => {
                        let lr_t = lr * (1.0 - beta_2.powi(t)).sqrt() / (1.0 - beta_1.powi(t));
                        for (((p, g), m), v) in param.data.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                            *m = beta_1 * *m + (1.0 - beta_1) * g;
                            *v = beta_2 * *v + (1.0 - beta_2) * g * g;
                            *p -= lr_t * *m / (v.sqrt() + epsilon);
                        }
                    }
                    OptimizerConfig::Sgd { momentum } => {
                        for ((p, g), m) in param.data.iter_mut().zip(grad).zip(m.iter_mut()) {
                            *m = momentum * *m - lr * g;
                            *p += *m;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Padding, Section};

    fn one_conv() -> Graph {
        let mut g = Graph::new([2, 2, 1], true);
        g.builder(0, Section::Backbone)
            .conv("c", 0, 1, (1, 1), (1, 1), Padding::Valid, true)
            .unwrap();
        g
    }

    #[test]
    fn rmsprop_first_step_matches_keras_formula() {
        let mut g = one_conv();
        let before = g.groups()[0].tensors[0].data[0];
        let grads = Gradients {
            params: vec![Some(vec![Some(vec![0.5]), None])],
            captured: None,
        };
        let mut opt = Optimizer::new(OptimizerConfig::default(), 1e-4);
        opt.step(&mut g, &grads);
        let acc = 0.1f32 * 0.25;
        let expected = before - 1e-4 * 0.5 / (acc.sqrt() + 1e-7);
        assert!((g.groups()[0].tensors[0].data[0] - expected).abs() < 1e-9);
        // no gradient => bias untouched
        assert_eq!(g.groups()[0].tensors[1].data[0], 0.0);
    }

    #[test]
    fn groups_without_gradients_are_bit_identical() {
        let mut g = one_conv();
        let before = g.clone();
        let grads = Gradients {
            params: vec![None],
            captured: None,
        };
        let mut opt = Optimizer::new(
            OptimizerConfig::Adam {
                beta_1: 0.9,
                beta_2: 0.999,
                epsilon: 1e-7,
            },
            1e-2,
        );
        opt.step(&mut g, &grads);
        assert_eq!(g.groups(), before.groups());
    }
}
