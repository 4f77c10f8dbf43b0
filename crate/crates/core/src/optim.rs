//! AdamW with linear warmup followed by cosine decay.

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Step size at `step` (0-based) of a `cfg.steps`-long run.
pub fn learning_rate(cfg: &OptimConfig, step: usize) -> f64 {
    let total = cfg.steps.max(1);
    let warmup = ((cfg.warmup_frac * total as f64).ceil() as usize).min(total);
    if step < warmup {
        return cfg.lr * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub step: usize,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Applies one update; parameters without a gradient only decay.
    /// Returns the step size used.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<f64> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let c = &self.cfg;
        let lr = learning_rate(c, self.step);
        self.step += 1;
        let clip = match c.grad_clip {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flatten()
                    .flat_map(|g| g.data())
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            p.iter_mut().for_each(|x| *x -= lr * c.weight_decay * *x);
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for k in 0..p.len() {
                let gk = g.data()[k] * clip;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                p[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = OptimConfig {
            steps: 100,
            ..OptimConfig::default()
        };
        assert!((learning_rate(&cfg, 0) - 1e-4).abs() < 1e-15);
        assert!((learning_rate(&cfg, 9) - 1e-3).abs() < 1e-15);
        assert!((learning_rate(&cfg, 10) - 1e-3).abs() < 1e-15);
        assert!(learning_rate(&cfg, 55) < learning_rate(&cfg, 30));
        assert!(learning_rate(&cfg, 99) < 1e-6);
    }

    #[test]
    fn first_step_moves_by_lr_in_gradient_sign() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let cfg = OptimConfig {
            steps: 1,
            warmup_frac: 0.0,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        let g = Tensor::new(vec![2], vec![3.0, -0.5]).unwrap();
        let lr = opt.update(&mut store, &[Some(g)]).unwrap();
        let w = store.get(store.id("w").unwrap()).data();
        // Bias-corrected Adam's first step is lr * sign(g) up to eps.
        assert!((w[0] - (1.0 - lr)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + lr)).abs() < 1e-9);
    }
}
