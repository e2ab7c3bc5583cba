//! Momentum SGD with weight decay, warmup and step decay.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::detector::{DetectorModel, Gradients};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (0-based) at whose start the rate is multiplied by `decay`.
    pub lr_steps: Vec<usize>,
    pub decay: f64,
    /// Linear warmup length in optimizer steps.
    pub warmup_steps: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_steps: vec![16, 22],
            decay: 0.1,
            warmup_steps: 20,
            grad_clip: Some(10.0),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.lr) || !finite_nonneg(self.weight_decay) || !finite_nonneg(self.decay) {
            return Err(Error::config("lr, weight_decay and decay must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("grad_clip must be > 0"));
        }
        Ok(())
    }

    /// Learning rate for `epoch` and global optimizer step `step`.
    pub fn rate(&self, epoch: usize, step: usize) -> f64 {
        let decays = self.lr_steps.iter().filter(|&&e| epoch >= e).count();
        let mut lr = self.lr * self.decay.powi(decays as i32);
        if step < self.warmup_steps {
            lr *= (step + 1) as f64 / self.warmup_steps as f64;
        }
        lr
    }
}

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Gradients<T>,
    steps: usize,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig, model: &DetectorModel<T>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, velocity: model.zero_grads(), steps: 0 })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Applies one update; frozen parameter groups are left untouched.
    pub fn step(&mut self, model: &mut DetectorModel<T>, grads: &Gradients<T>, epoch: usize) {
        let lr = T::lit(self.config.rate(epoch, self.steps));
        let mu = T::lit(self.config.momentum);
        let wd = T::lit(self.config.weight_decay);
        let clip = self.config.grad_clip.map_or(T::one(), |c| {
            let norm = grads.sq_norm().sqrt();
            let c = T::lit(c);
            if norm > c {
                c / norm
            } else {
                T::one()
            }
        });
        let frozen: Vec<bool> = model.layers().iter().map(|(_, g, _)| model.is_frozen(*g)).collect();
        let update2 = |p: &mut Array2<T>, g: &Array2<T>, v: &mut Array2<T>| {
            ndarray::Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
                *v = mu * *v + g * clip + wd * *p;
                *p -= lr * *v;
            });
        };
        let update1 = |p: &mut Array1<T>, g: &Array1<T>, v: &mut Array1<T>| {
            ndarray::Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
                *v = mu * *v + g * clip + wd * *p;
                *p -= lr * *v;
            });
        };
        for (((_, conv), (g, v)), skip) in model
            .layers_mut()
            .into_iter()
            .zip(grads.iter().zip(self.velocity.iter_mut()))
            .zip(frozen)
        {
            if skip {
                continue;
            }
            update2(&mut conv.weight, &g.weight, &mut v.weight);
            update1(&mut conv.bias, &g.bias, &mut v.bias);
        }
        self.steps += 1;
    }
}
