//! Adam with bias correction.

use super::nn::{GradBuffer, Var};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    /// First and second moment accumulators, slot-aligned with the variables.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(vars: &[&Var], lr: f64) -> AdamState {
        let mut m = vec![Vec::new(); vars.len()];
        let mut v = vec![Vec::new(); vars.len()];
        for var in vars {
            m[var.slot] = vec![0.0; var.len()];
            v[var.slot] = vec![0.0; var.len()];
        }
        AdamState { step: 0, lr, m, v }
    }

    /// One update. Gradients and parameters are slot-aligned.
    pub fn apply(&mut self, vars: &mut [&mut Var], grads: &GradBuffer) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        for var in vars.iter_mut() {
            let slot = var.slot;
            let g = &grads.by_slot[slot];
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..var.w.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                var.w[i] -= self.lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
    }
}
