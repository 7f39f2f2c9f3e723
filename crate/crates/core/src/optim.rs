//! Adam with linear warmup to a constant learning rate.

use serde::{Deserialize, Serialize};

use crate::encoder::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub warmup_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_steps: 0,
        }
    }
}

impl AdamConfig {
    /// Learning rate for the `step`-th update (0-based).
    pub fn rate_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

pub struct Adam {
    config: AdamConfig,
    first: Parameters,
    second: Parameters,
    step: usize,
}

impl Adam {
    pub fn new(config: AdamConfig, like: &Parameters) -> Self {
        Adam {
            config,
            first: like.zeros_like(),
            second: like.zeros_like(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One bias-corrected update. Parameters are rounded to `f32` afterwards
    /// so the trained state is exactly what a checkpoint stores.
    pub fn update(&mut self, params: &mut Parameters, grads: &Parameters) {
        let c = self.config;
        let lr = c.rate_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.first.tensors_mut())
            .zip(self.second.tensors_mut());
        for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in tensors {
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + c.epsilon);
                    *p = (*p - update) as f32 as f64;
                });
        }
    }
}
