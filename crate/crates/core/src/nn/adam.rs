use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::error::{Error, Result};

/// Linear warmup to the peak over the first epoch, then linear decay to
/// zero at the final step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_steps: usize, total_steps: usize) -> Self {
        LrSchedule {
            peak_lr,
            warmup_steps: warmup_steps.max(1),
            total_steps: total_steps.max(warmup_steps.max(1) + 1),
        }
    }

    /// Learning rate after `step` completed updates.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            self.peak_lr * step as f64 / self.warmup_steps as f64
        } else if step >= self.total_steps {
            0.0
        } else {
            let remaining = (self.total_steps - step) as f64;
            let span = (self.total_steps - self.warmup_steps) as f64;
            self.peak_lr * remaining / span
        }
    }
}

/// Adam moments over arbitrary named flat tensors; shared by the
/// transformer and the recurrent baseline.
pub struct AdamCore {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamCore {
    pub fn new() -> Self {
        AdamCore {
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update with the scheduled learning rate. A non-finite gradient
    /// aborts with the offending tensor's name.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut [f64])],
        grads: &[(String, &[f64])],
        schedule: &LrSchedule,
    ) -> Result<f64> {
        for (name, g) in grads {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::numeric(name.clone(), "non-finite gradient"));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
            self.v = grads.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
        }
        self.step += 1;
        let lr = schedule.lr_at(self.step);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);

        for i in 0..params.len() {
            let p = &mut params[i].1;
            let g = grads[i].1;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(lr)
    }
}

impl Default for AdamCore {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam over the tracker's parameter struct.
pub struct Adam {
    core: AdamCore,
}

impl Adam {
    pub fn new(_params: &ModelParams) -> Self {
        Adam {
            core: AdamCore::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.core.step_count()
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &ModelParams,
        schedule: &LrSchedule,
    ) -> Result<f64> {
        let mut p_flat = params.flat_mut();
        let g_flat: Vec<(String, &[f64])> = grads.flat();
        self.core.step(&mut p_flat, &g_flat, schedule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;

    fn tiny_params() -> ModelParams {
        let cfg = ModelConfig {
            d: 8,
            n_layers: 1,
            n_heads: 2,
            d_cnn: 8,
            vocab_size: 12,
            max_decode_len: 6,
            label_smoothing: 0.0,
            dropout: 0.0,
        };
        ModelParams::init(&cfg, 12, 1).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::new(1e-3, 100, 1000);
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(100), 1e-3);
        assert!((s.lr_at(550) - 0.5e-3).abs() < 1e-12);
        assert_eq!(s.lr_at(1000), 0.0);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut params = tiny_params();
        let before = params.clone();
        let grads = params.zeros_like();
        let mut adam = Adam::new(&params);
        let schedule = LrSchedule::new(0.1, 1, 100);
        adam.step(&mut params, &grads, &schedule).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn descends_a_quadratic() {
        // f(x) = x^2 on the first embedding entry; gradient 2x.
        let mut params = tiny_params();
        params.embedding[[0, 0]] = 1.0;
        let mut adam = Adam::new(&params);
        let schedule = LrSchedule {
            peak_lr: 0.1,
            warmup_steps: 1,
            total_steps: 1_000_000,
        };
        let x0 = params.embedding[[0, 0]];
        for _ in 0..50 {
            let mut grads = params.zeros_like();
            grads.embedding[[0, 0]] = 2.0 * params.embedding[[0, 0]];
            adam.step(&mut params, &grads, &schedule).unwrap();
        }
        assert!(params.embedding[[0, 0]] < x0, "Adam failed to descend");
    }

    #[test]
    fn nan_gradient_aborts_with_tensor_name() {
        let mut params = tiny_params();
        let mut grads = params.zeros_like();
        grads.f_bb.w[[0, 0]] = f64::NAN;
        let mut adam = Adam::new(&params);
        let schedule = LrSchedule::new(0.1, 1, 100);
        let err = adam.step(&mut params, &grads, &schedule).unwrap_err();
        assert!(err.to_string().contains("f_bb.w"), "{err}");
    }
}
