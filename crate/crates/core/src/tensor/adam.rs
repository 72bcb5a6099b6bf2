use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{contract, Result};

/// Adam hyperparameters. Weight decay is the classic L2 form: `wd * w` is
/// added to the gradient before the moment updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer state: first and second moments per parameter plus step count.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Vec<f64>> = params.into_iter().map(|p| vec![0.0; p.len()]).collect();
        let v = m.clone();
        Self {
            config,
            m,
            v,
            step: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` belongs to `params[i]`; a `None` gradient for a
    /// trainable parameter is a contract violation. Entries of `params`
    /// flagged `false` in `trainable` are skipped.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Option<Tensor>],
        trainable: &[bool],
    ) -> Result<()> {
        contract!(
            params.len() == self.m.len()
                && grads.len() == params.len()
                && trainable.len() == params.len(),
            "optimizer tracks {} parameters but got {} parameters / {} gradients",
            self.m.len(),
            params.len(),
            grads.len()
        );
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            let Some(g) = &grads[i] else {
                return Err(crate::Error::Contract(format!(
                    "parameter {i} has no gradient; run backward first"
                )));
            };
            contract!(
                g.len() == p.len(),
                "gradient {i} has {} values for a parameter of {}",
                g.len(),
                p.len()
            );
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j] + weight_decay * *w;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_one(grad: f64, cfg: AdamConfig, start: f64) -> f64 {
        let mut p = Tensor::from_vec(vec![start]);
        let mut opt = Adam::new(cfg, [&p]);
        opt.step(
            &mut [&mut p],
            &[Some(Tensor::from_vec(vec![grad]))],
            &[true],
        )
        .unwrap();
        assert_eq!(opt.step_count(), 1);
        p.item()
    }

    #[test]
    fn zero_grad_without_decay_is_noop() {
        assert_eq!(run_one(0.0, AdamConfig::default(), 0.7), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::default();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        for g in [3.0, -0.25] {
            let moved = 1.0 - run_one(g, cfg, 1.0);
            assert!(
                (moved - cfg.lr * f64::signum(g)).abs() <= 1e-6 * cfg.lr,
                "{moved}"
            );
        }
    }

    #[test]
    fn decay_enters_through_the_gradient() {
        let cfg = AdamConfig {
            weight_decay: 1e-2,
            ..AdamConfig::default()
        };
        // the decay term alone is a positive gradient, so the first
        // normalized step is a full lr toward zero
        let p = run_one(0.0, cfg, 2.0);
        assert!((p - (2.0 - cfg.lr)).abs() < 1e-6 * cfg.lr, "{p}");
        assert_eq!(run_one(0.0, cfg, 0.0), 0.0);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut p = Tensor::from_vec(vec![1.0]);
        let mut opt = Adam::new(AdamConfig::default(), [&p]);
        assert!(opt.step(&mut [&mut p], &[None], &[true]).is_err());
    }
}
