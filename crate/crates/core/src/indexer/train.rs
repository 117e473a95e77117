use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::seed::SeedTree;

use super::{projector_grad, Dataset, Projector};

/// Optimiser and schedule settings for projector training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub rank: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub rows_per_step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            rank: 16,
            lr: 1e-3,
            warmup_steps: 100,
            steps: 600,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            rows_per_step: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.steps == 0 || self.rows_per_step == 0 {
            return Err(arg_err!("rank, steps and rows_per_step must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(arg_err!("learning rate must be finite and non-negative"));
        }
        if !(self.max_grad_norm > 0.0) || self.weight_decay < 0.0 {
            return Err(arg_err!("max_grad_norm must be positive, weight_decay non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(arg_err!("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Linear warmup to `lr`, then cosine decay to zero at `steps`.
pub fn lr_at(config: &Stage1Config, step: usize) -> f64 {
    let warm = config.warmup_steps.min(config.steps);
    if step < warm {
        return config.lr * (step + 1) as f64 / warm as f64;
    }
    let span = (config.steps - warm).max(1) as f64;
    let progress = ((step - warm) as f64 / span).min(1.0);
    0.5 * config.lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam with decoupled weight decay over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamW {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let update = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
            params[i] -= lr * (update + self.weight_decay * params[i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub projector: Projector,
    /// Mean batch loss before each update.
    pub losses: Vec<f64>,
}

/// Train a projector from Gaussian initialisation. Deterministic in `seed`.
pub fn train_projector(dataset: &Dataset, config: &Stage1Config, seed: SeedTree) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(arg_err!("cannot train on an empty dataset"));
    }
    let d = dataset.rows[0].query_pre.len();
    let mut proj = Projector::gaussian(config.rank, d, seed.child("init")).rounded();
    let n = proj.r * proj.d;
    let mut params: Vec<f64> = proj.w_q.iter().chain(&proj.w_k).copied().collect();
    let mut opt = AdamW::new(2 * n, config.beta1, config.beta2, config.eps, config.weight_decay);
    let mut rng = seed.child("batches").rng();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<usize> = (0..config.rows_per_step)
            .map(|_| rng.random_range(0..dataset.rows.len()))
            .collect();
        let g = projector_grad(dataset, &batch, &proj)?;
        if !g.loss.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at step {step}")));
        }
        losses.push(g.loss);
        let norm = g.norm();
        let clip = if norm > config.max_grad_norm { config.max_grad_norm / norm } else { 1.0 };
        let grads: Vec<f64> = g.w_q.iter().chain(&g.w_k).map(|x| x * clip).collect();
        opt.step(&mut params, &grads, lr_at(config, step));
        proj.w_q.copy_from_slice(&params[..n]);
        proj.w_k.copy_from_slice(&params[n..]);
    }
    Ok(TrainOutcome {
        projector: proj.rounded(),
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let c = Stage1Config::default();
        assert!((lr_at(&c, 0) - 1e-5).abs() < 1e-15);
        assert!((lr_at(&c, 99) - 1e-3).abs() < 1e-15);
        assert!((lr_at(&c, 100) - 1e-3).abs() < 1e-15);
        assert!((lr_at(&c, 350) - 5e-4).abs() < 1e-12);
        assert!(lr_at(&c, 599) < 1e-6);
        for s in 100..599 {
            assert!(lr_at(&c, s + 1) <= lr_at(&c, s));
        }
    }

    #[test]
    fn adamw_first_step_is_sign_sized() {
        let mut opt = AdamW::new(2, 0.9, 0.999, 1e-8, 0.0);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[0.5, -3.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adamw_decay_without_gradient() {
        let mut opt = AdamW::new(1, 0.9, 0.999, 1e-8, 0.5);
        let mut p = vec![2.0];
        opt.step(&mut p, &[0.0], 0.1);
        assert!((p[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn bad_config_rejected() {
        let c = Stage1Config {
            steps: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = Stage1Config {
            lr: f64::NAN,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
