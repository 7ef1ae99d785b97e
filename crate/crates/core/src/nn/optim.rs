use serde::{Deserialize, Serialize};

use super::{NnError, ParameterSet, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    #[serde(rename = "rmsprop")]
    RmsProp {
        alpha: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn adam(beta1: f64, beta2: f64) -> Self {
        OptimizerKind::Adam {
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    pub fn rmsprop() -> Self {
        OptimizerKind::RmsProp {
            alpha: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step_count: u64,
    /// Adam first moments.
    first: Vec<Vec<f64>>,
    /// Adam second moments, or the RMSProp running mean square.
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(NnError::ParamShape {
                index: grads.len(),
                expected: params.len(),
                got: grads.len(),
            });
        }
        for (i, (p, g)) in params.tensors.iter().zip(grads).enumerate() {
            if p.values.len() != g.len() {
                return Err(NnError::ParamShape {
                    index: i,
                    expected: p.values.len(),
                    got: g.len(),
                });
            }
        }
        if self.second.is_empty() {
            self.first = params
                .tensors
                .iter()
                .map(|p| vec![0.0; p.values.len()])
                .collect();
            self.second = self.first.clone();
        }
        self.step_count += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.tensors.iter_mut().zip(grads) {
                    for (w, d) in p.values.iter_mut().zip(g) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step_count as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .tensors
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for i in 0..g.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::RmsProp { alpha, eps } => {
                for ((p, g), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.second) {
                    for i in 0..g.len() {
                        v[i] = alpha * v[i] + (1.0 - alpha) * g[i] * g[i];
                        p.values[i] -= lr * g[i] / (v[i].sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Step several parameter sets as one group; `grads` follows their
    /// concatenated tensor order.
    pub fn step_sets(&mut self, sets: &mut [&mut ParameterSet], grads: &[Vec<f64>]) -> Result<()> {
        let mut all = ParameterSet {
            tensors: Vec::new(),
        };
        let mut counts = Vec::with_capacity(sets.len());
        for s in sets.iter_mut() {
            counts.push(s.tensors.len());
            all.tensors.append(&mut s.tensors);
        }
        let result = self.step(&mut all, grads);
        let mut it = all.tensors.into_iter();
        for (s, c) in sets.iter_mut().zip(counts) {
            s.tensors = it.by_ref().take(c).collect();
        }
        result
    }
}

/// Clamp every parameter entry to `[-c, c]`.
pub fn clip_weight_values(params: &mut ParameterSet, c: f64) {
    for p in &mut params.tensors {
        for w in &mut p.values {
            *w = w.clamp(-c, c);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    Value,
    Norm,
}

/// Value mode clamps each entry; norm mode rescales all gradients by
/// `bound / |g|` when the global L2 norm exceeds `bound`.
pub fn clip_gradients(grads: &mut [Vec<f64>], mode: ClipMode, bound: f64) {
    match mode {
        ClipMode::Value => {
            for g in grads.iter_mut().flatten() {
                *g = g.clamp(-bound, bound);
            }
        }
        ClipMode::Norm => {
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if norm > bound {
                let s = bound / norm;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
    }
}
