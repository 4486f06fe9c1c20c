use alloc::vec;
use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every tensor in `params` from its gradient buffer; a
    /// missing buffer counts as a zero gradient. Moment buffers are created
    /// on the first call and must keep matching shapes afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape("adam_step", &[self.m.len()], &[params.len()]));
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.m[i].len() {
                return Err(Error::shape("adam_step", &[self.m[i].len()], p.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::powf(self.beta1, t as f32);
        let bc2 = 1.0 - libm::powf(self.beta2, t as f32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad().map(|g| g.to_vec());
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] = data[j] * decay - self.lr * mhat / (libm::sqrtf(vhat) + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        p.accumulate_grad(&[0.0; 3]).unwrap();
        let before = p.clone();
        let mut opt = Adam::new(0.1, 0.0);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), before.data());
    }

    #[test]
    fn single_step_with_bias_correction() {
        // m̂ = 1, v̂ = 1 after bias correction, so the step is lr·1/(1+ε).
        let mut p = Tensor::scalar(1.0);
        p.accumulate_grad(&[1.0]).unwrap();
        let mut opt = Adam::new(0.1, 0.0);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = Tensor::scalar(2.0);
        let mut opt = Adam::new(0.1, 0.5);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-7);
    }

    #[test]
    fn mismatched_shapes_error() {
        let mut a = Tensor::zeros(&[2]);
        let mut opt = Adam::new(0.1, 0.0);
        opt.step(&mut [&mut a]).unwrap();
        let mut b = Tensor::zeros(&[3]);
        assert!(matches!(opt.step(&mut [&mut b]), Err(Error::Shape { .. })));
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = Tensor::new(&[2], vec![0.3, -0.7]).unwrap();
            let mut opt = Adam::new(0.01, 0.05);
            for k in 0..50 {
                p.zero_grad();
                let g: Vec<f32> = p.data().iter().map(|v| 2.0 * v + k as f32 * 1e-3).collect();
                p.accumulate_grad(&g).unwrap();
                opt.step(&mut [&mut p]).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
        assert_eq!(a.data()[1].to_bits(), b.data()[1].to_bits());
    }
}
