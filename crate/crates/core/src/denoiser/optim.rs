use serde::{Deserialize, Serialize};

use super::nn::Tensors;
use super::DenoiserError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 4e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one tensor store. No weight decay, no warmup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Tensors,
    v: Tensors,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Tensors) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn matches(&self, params: &Tensors) -> bool {
        self.m.same_layout(params) && self.v.same_layout(params)
    }

    /// One update. A zero learning rate leaves `params` bit-identical.
    pub fn update(&mut self, params: &mut Tensors, grads: &Tensors) -> Result<(), DenoiserError> {
        if !grads.all_finite() {
            return Err(DenoiserError::NonFiniteGradient);
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let stores = params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()));
        for (((_, p), (_, g)), ((_, m), (_, v))) in stores {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    if lr != 0.0 {
                        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    }
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = Tensors::new();
        p.add("w", array![[1.0, -2.0]]);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.fill(0.3);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            &p,
        );
        adam.update(&mut p, &g).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensors::new();
        let id = p.add("w", array![[1.0]]);
        let mut g = p.zeros_like();
        g.fill(5.0);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &p,
        );
        adam.update(&mut p, &g).unwrap();
        assert!((p[id][[0, 0]] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut p = Tensors::new();
        p.add("w", array![[1.0]]);
        let mut g = p.zeros_like();
        g.fill(f64::NAN);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        assert_eq!(adam.update(&mut p, &g), Err(DenoiserError::NonFiniteGradient));
    }
}
