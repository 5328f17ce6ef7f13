//! Adam with decoupled weight decay, plus a warmup/cosine learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::weights::ParamMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamMap,
    pub v: ParamMap,
}

impl AdamState {
    pub fn new(params: &ParamMap) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

impl AdamW {
    /// One update with learning rate `lr`. Decay applies to matrices only.
    pub fn step(&self, state: &mut AdamState, params: &mut ParamMap, grads: &ParamMap, lr: f64) {
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Ok(g) = grads.get(name) else { continue };
            let m = state.m.get_mut(name).expect("moment per parameter");
            let v = state.v.get_mut(name).expect("moment per parameter");
            let decay = if p.shape().len() >= 2 {
                self.weight_decay
            } else {
                0.0
            };
            let (pd, gd, md, vd) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * pd[i]);
            }
        }
    }
}

/// Linear warmup to `peak`, then cosine decay to `peak * floor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub floor: f64,
}

impl LrSchedule {
    /// Rate for the 0-based update index `step`.
    pub fn rate(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.peak * (self.floor + (1.0 - self.floor) * cosine)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut p = ParamMap::new();
        p.insert(
            "w",
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let mut g = ParamMap::new();
        g.insert("w", Tensor::filled(&[2, 2], 0.5));
        let mut state = AdamState::new(&p);
        let before = p.clone();
        AdamW::default().step(&mut state, &mut p, &g, 0.0);
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = ParamMap::new();
        p.insert("x", Tensor::vector(vec![3.0, -2.0]));
        let mut state = AdamState::new(&p);
        let opt = AdamW {
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..2000 {
            let mut g = ParamMap::new();
            g.insert("x", p.get("x").unwrap().clone());
            opt.step(&mut state, &mut p, &g, 0.01);
        }
        assert!(p.get("x").unwrap().frobenius() < 1e-3);
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            peak: 1.0,
            warmup_steps: 10,
            total_steps: 110,
            floor: 0.1,
        };
        assert!((s.rate(0) - 0.1).abs() < 1e-12);
        assert!((s.rate(9) - 1.0).abs() < 1e-12);
        assert!((s.rate(10) - 1.0).abs() < 1e-12);
        assert!((s.rate(110) - 0.1).abs() < 1e-12);
        assert!(s.rate(50) < 1.0 && s.rate(50) > 0.1);
    }
}
