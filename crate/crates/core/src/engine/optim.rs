//! Parameter update rules. State is keyed by parameter name, so an optimizer
//! can resume against a rebuilt graph as long as the topology matches.

use super::OptimizerConfig;
use crate::engine::ops::ParamView;
use crate::netspec::ModelGraph;
use std::collections::HashMap;

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct Optimizer {
    cfg: OptimizerConfig,
    /// Adam step counter; shared by every parameter.
    t: u64,
    state: HashMap<String, AdamState>,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Optimizer { cfg: cfg.clone(), t: 0, state: HashMap::new() }
    }

    /// Applies one update from the gradients currently stored in the graph.
    pub fn step(&mut self, graph: &mut ModelGraph) {
        match self.cfg.clone() {
            OptimizerConfig::Sgd { learning_rate } => {
                graph.for_each_param(&mut |p: ParamView| {
                    for (w, g) in p.value.iter_mut().zip(p.grad.iter()) {
                        *w -= learning_rate * g;
                    }
                });
            }
            OptimizerConfig::Adam { learning_rate, beta1, beta2, epsilon, clip_norm } => {
                let scale = match clip_norm {
                    Some(limit) => {
                        let mut sq = 0.0;
                        graph.for_each_param(&mut |p: ParamView| {
                            for g in p.grad.iter() {
                                sq += g * g;
                            }
                        });
                        let norm = sq.sqrt();
                        if norm > limit {
                            limit / norm
                        } else {
                            1.0
                        }
                    }
                    None => 1.0,
                };
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                let state = &mut self.state;
                graph.for_each_param(&mut |p: ParamView| {
                    let len = p.value.len();
                    let s = state.entry(p.name.clone()).or_insert_with(|| AdamState {
                        m: vec![0.0; len],
                        v: vec![0.0; len],
                    });
                    assert_eq!(s.m.len(), len, "parameter {} changed size", p.name);
                    for i in 0..len {
                        let g = p.grad[i] * scale;
                        s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * g;
                        s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * g * g;
                        let m_hat = s.m[i] / bc1;
                        let v_hat = s.v[i] / bc2;
                        p.value[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                    }
                });
            }
        }
    }
}
