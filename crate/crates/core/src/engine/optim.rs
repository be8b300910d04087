//! Adam updates and a reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments, kept in f64.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<S: Scalar>(params: &ParamStore<S>, cfg: AdamConfig) -> Self {
        let sizes: Vec<usize> = params.iter().map(|t| t.data.len()).collect();
        Self {
            cfg,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update<S: Scalar>(&mut self, params: &mut ParamStore<S>, grads: &ParamStore<S>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let gi = g.data[i].to_f64_lossy();
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let upd = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p.data[i] = S::lit(p.data[i].to_f64_lossy() - upd);
            }
        }
    }
}

/// Multiplies the rate by `factor` once the monitored value has failed to
/// strictly exceed its best for `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    lr: f64,
    best: f64,
    bad: usize,
}

impl ReduceOnPlateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            lr,
            best: f64::NEG_INFINITY,
            bad: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's metric; returns true if it is a new best.
    pub fn observe(&mut self, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.bad = 0;
            return true;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            self.lr *= self.factor;
            self.bad = 0;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_metric_halves_after_five_bad_epochs() {
        let mut s = ReduceOnPlateau::new(1e-3, 0.5, 5);
        let mut lrs = Vec::new();
        for _ in 0..12 {
            lrs.push(s.lr());
            s.observe(0.5);
        }
        assert_eq!(lrs[5], 1e-3);
        assert_eq!(lrs[6], 5e-4);
        assert_eq!(lrs[11], 2.5e-4);
    }

    #[test]
    fn improvement_resets_patience() {
        let mut s = ReduceOnPlateau::new(1.0, 0.5, 2);
        s.observe(0.1);
        s.observe(0.1);
        s.observe(0.2);
        s.observe(0.2);
        assert_eq!(s.lr(), 1.0);
        s.observe(0.2);
        assert_eq!(s.lr(), 0.5);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::<f64>::new();
        let id = p.add("w", &[2], vec![1.0, -1.0]);
        let mut g = p.zeros_like();
        g.get_mut(id).copy_from_slice(&[3.0, -0.5]);
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.update(&mut p, &g, 0.1);
        assert!((p.get(id)[0] - 0.9).abs() < 1e-6);
        assert!((p.get(id)[1] + 0.9).abs() < 1e-6);
    }
}
