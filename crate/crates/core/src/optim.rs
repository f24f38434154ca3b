//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    /// Moment buffers for parameters of the given sizes.
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of `params` with `grads` (same order as construction).
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::InvalidConfig("optimizer parameter set changed".into()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - math::powf(c.beta1, t);
        let bc2 = 1.0 - math::powf(c.beta2, t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i];
            if g.len() != p.len() || self.m[i].len() != p.len() {
                return Err(crate::error::shape_err("adamw", &[g.len()], &[p.len()]));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x -= lr * (mhat / (math::sqrt(vhat) + c.eps) + c.weight_decay * *x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &[3]);
        opt.update(&mut [&mut p], &[&[0.3, -4.0, 0.0]], 0.01).unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-6);
        assert!((p.data()[1] + 1.99).abs() < 1e-6);
        assert_eq!(p.data()[2], 0.5);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.1, ..Default::default() }, &[2]);
        opt.update(&mut [&mut p], &[&[5.0, -1.0]], 0.0).unwrap();
        assert!(p.bits_eq(&before));
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Tensor::new(&[1], vec![3.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &[1]);
        for _ in 0..2000 {
            let g = [2.0 * (p.data()[0] - 1.0)];
            opt.update(&mut [&mut p], &[&g], 0.01).unwrap();
        }
        assert!((p.data()[0] - 1.0).abs() < 1e-3);
    }
}
