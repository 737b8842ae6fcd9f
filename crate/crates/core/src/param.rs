//! Named trainable leaves and random initialisers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::tensor::Tensor;

pub type ModelRng = ChaCha8Rng;

/// A named, trainable leaf tensor. Updating it swaps in a fresh leaf, so
/// graphs built from the previous value remain valid snapshots.
#[derive(Debug, Clone)]
pub struct Param {
    name: String,
    value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            value: Tensor::parameter(data, shape)?,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    /// The accumulated gradient (zeros if nothing reached this leaf).
    pub fn grad(&self) -> Vec<f64> {
        self.value
            .grad()
            .map_or_else(|| vec![0.0; self.numel()], |g| g.clone())
    }

    pub fn zero_grad(&self) {
        self.value.zero_grad();
    }

    /// Replaces the value; the gradient slot starts from zero again.
    pub fn assign(&mut self, data: Vec<f64>) -> Result<()> {
        self.value = Tensor::parameter(data, self.value.shape())?;
        Ok(())
    }
}

pub fn normal(rng: &mut ModelRng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

pub fn uniform(rng: &mut ModelRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Glorot/Xavier uniform for a `fan_in × fan_out` matrix.
pub fn xavier(rng: &mut ModelRng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, fan_in * fan_out, -a, a)
}
