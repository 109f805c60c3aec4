use serde::{Deserialize, Serialize};

use super::Parameterized;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with a per-tensor learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new<P: Parameterized>(config: AdamConfig, params: &P) -> Self {
        let shapes: Vec<usize> = params.params().iter().map(|p| p.data.len()).collect();
        Self {
            config,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `rate_for` maps a tensor name to its learning rate; a zero
    /// rate leaves that tensor untouched bit for bit.
    pub fn step<P: Parameterized>(&mut self, params: &mut P, grads: &P, rate_for: impl Fn(&str) -> f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);
        let grads = grads.params();
        for (((param, grad), m), v) in params
            .params_mut()
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            debug_assert_eq!(param.name, grad.name);
            let rate = rate_for(&param.name);
            for i in 0..param.data.len() {
                let g = grad.data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                if rate != 0.0 {
                    let m_hat = m[i] / correction1;
                    let v_hat = v[i] / correction2;
                    param.data[i] -= rate * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
    }
}
