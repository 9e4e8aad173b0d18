use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam moments and hyper-parameters for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { first: zeros.clone(), second: zeros, step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Config("parameter, gradient and moment counts differ".into()));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::ShapeMismatch { op: "adam", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                md[j] = b1 * md[j] + (1.0 - b1) * gj;
                vd[j] = b2 * vd[j] + (1.0 - b2) * gj * gj;
                let mhat = md[j] / bc1;
                let vhat = vd[j] / bc2;
                pd[j] -= lr * mhat / (libm::sqrt(vhat) + eps);
            }
        }
        Ok(())
    }
}
