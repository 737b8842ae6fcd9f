//! Adam with bias correction over named parameters.

use crate::error::{Error, Result};
use crate::param::Param;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// The parameter list must come in the same order on every call.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        let grads: Vec<Vec<f64>> = params.iter().map(|p| p.grad()).collect();
        for (p, g) in params.iter().zip(&grads) {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NanGradient(format!("{} (entry {i} = {})", p.name(), g[i])));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for ((p, g), (m, v)) in params.iter_mut().zip(&grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let mut w = p.data().to_vec();
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                w[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            p.assign(w)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Param::new("w", vec![1.0, -2.0], &[2]).unwrap();
        let mut opt = Adam::new(0.1, 0.9, 0.98, 1e-9);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Param::new("w", vec![0.5], &[1]).unwrap();
        p.tensor().scale(3.0).sum().backward().unwrap();
        let mut opt = Adam::new(0.01, 0.9, 0.98, 1e-9);
        opt.step(&mut [&mut p]).unwrap();
        let moved = 0.5 - p.data()[0];
        assert!((moved - 0.01 / (1.0 + 1e-9 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = Param::new("layer0.gate_w", vec![0.0], &[1]).unwrap();
        p.tensor().scale(f64::NAN).sum().backward().unwrap();
        let err = Adam::new(0.1, 0.9, 0.98, 1e-9).step(&mut [&mut p]).unwrap_err();
        assert!(err.to_string().contains("layer0.gate_w"));
    }
}
