//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::params::decays;
use super::tensor::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Matrix<f32>>,
    pub v: Vec<Matrix<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update with learning rate `lr`. Parameters and gradients must come
    /// in the same order on every call. Nothing is modified if any gradient
    /// is non-finite.
    pub fn step(
        &mut self,
        params: Vec<(String, &mut Matrix<f32>)>,
        grads: Vec<&Matrix<f32>>,
        lr: f64,
    ) -> Result<()> {
        assert_eq!(params.len(), grads.len(), "params/grads length");
        for ((name, p), g) in params.iter().zip(&grads) {
            assert_eq!(p.shape(), g.shape(), "gradient shape for {name}");
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| g.zeros_like()).collect();
            self.v = grads.iter().map(|g| g.zeros_like()).collect();
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = c.eps as f32;
        for (i, ((name, p), g)) in params.into_iter().zip(grads).enumerate() {
            let decay = if decays(&name) {
                1.0 - (lr * c.weight_decay) as f32
            } else {
                1.0
            };
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            for (j, (w, &gj)) in p.data.iter_mut().zip(&g.data).enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                *w = *w * decay - step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> Matrix<f32> {
        Matrix::from_vec(1, 2, vec![v, -v])
    }

    #[test]
    fn lr_zero_is_noop() {
        let mut p = one(1.5);
        let g = one(0.3);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(vec![("w".into(), &mut p)], vec![&g], 0.0).unwrap();
        assert_eq!(p, one(1.5));
    }

    #[test]
    fn zero_grad_only_decays() {
        let mut p = one(2.0);
        let mut bias = one(2.0);
        let g = one(0.0);
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg);
        opt.step(vec![("w".into(), &mut p), ("layers.0.b1".into(), &mut bias)], vec![&g, &g], 0.1)
            .unwrap();
        assert_eq!(p, one(2.0 * (1.0 - 0.05)));
        assert_eq!(bias, one(2.0));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one(0.0);
        let g = one(4.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg);
        opt.step(vec![("w".into(), &mut p)], vec![&g], 0.01).unwrap();
        assert!((p.data[0] + 0.01).abs() < 1e-6 && (p.data[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_named() {
        let mut p = one(1.0);
        let g = Matrix::from_vec(1, 2, vec![f32::NAN, 0.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(vec![("layers.1.wq".into(), &mut p)], vec![&g], 0.1).unwrap_err();
        assert!(err.to_string().contains("layers.1.wq"));
        assert_eq!(p, one(1.0));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn quadratic_converges() {
        let mut p = Matrix::from_vec(1, 3, vec![5.0f32, -3.0, 2.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg);
        for _ in 0..500 {
            let g = Matrix::from_vec(1, 3, p.data.iter().map(|x| 2.0 * x).collect());
            opt.step(vec![("w".into(), &mut p)], vec![&g], 0.05).unwrap();
        }
        assert!(p.data.iter().all(|x| x.abs() < 0.05), "{:?}", p.data);
    }
}
