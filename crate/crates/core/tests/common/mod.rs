//! Shared oracles: central-difference gradient checks, a dense SVD and a
//! naive per-token attention.
#![allow(dead_code)]

pub mod cases;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use transject::param::{ModelRng, Param};
use transject::tensor::no_grad;
use transject::{Result, Tensor};

pub const H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ModelRng {
    ModelRng::seed_from_u64(seed)
}

pub fn normals(rng: &mut ModelRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Normals pushed at least `gap` away from zero, for kinked ops.
pub fn away_from_zero(rng: &mut ModelRng, n: usize, gap: f64) -> Vec<f64> {
    normals(rng, n)
        .into_iter()
        .map(|v| if v.abs() < gap { gap.copysign(v) + v } else { v })
        .collect()
}

/// Mixed absolute/relative error; plain relative error blows up on
/// gradients that are numerically zero.
pub fn grad_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn project(out: &Tensor, w: &[f64]) -> f64 {
    out.data().iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Checks `f` against central differences with respect to every entry of
/// every input, through a fixed random projection of the output. Returns
/// the worst error.
pub fn gradcheck<F>(inputs: &[(Vec<f64>, Vec<usize>)], f: F, seed: u64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves = inputs
        .iter()
        .map(|(d, s)| Tensor::parameter(d.clone(), s))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&leaves)?;
    let w = normals(&mut rng(seed ^ 0x9e37), out.numel());
    out.mul(&Tensor::new(w.clone(), out.shape())?)?.sum().backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().map_or_else(|| vec![0.0; t.numel()], |g| g.clone()))
        .collect();

    let eval = |k: usize, j: usize, delta: f64| -> Result<f64> {
        let ts = inputs
            .iter()
            .enumerate()
            .map(|(i, (d, s))| {
                let mut d = d.clone();
                if i == k {
                    d[j] += delta;
                }
                Tensor::new(d, s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(project(&no_grad(|| f(&ts))?, &w))
    };
    let mut worst = 0.0f64;
    for (k, (d, _)) in inputs.iter().enumerate() {
        for j in 0..d.len() {
            let numeric = (eval(k, j, H)? - eval(k, j, -H)?) / (2.0 * H);
            worst = worst.max(grad_error(analytic[k][j], numeric));
        }
    }
    Ok(worst)
}

/// Same check over the parameters of a model-like value, perturbed in
/// place through [`Param::assign`].
pub fn param_gradcheck<M, P, E>(model: &mut M, params: P, eval: E, seed: u64) -> Result<f64>
where
    P: Fn(&mut M) -> Vec<&mut Param>,
    E: Fn(&M) -> Result<Tensor>,
{
    let out = eval(model)?;
    let w = normals(&mut rng(seed ^ 0x51ed), out.numel());
    out.mul(&Tensor::new(w.clone(), out.shape())?)?.sum().backward()?;
    let analytic: Vec<Vec<f64>> = params(model).iter().map(|p| p.grad()).collect();
    let originals: Vec<Vec<f64>> = params(model).iter().map(|p| p.data().to_vec()).collect();

    let mut worst = 0.0f64;
    for (k, orig) in originals.iter().enumerate() {
        for j in 0..orig.len() {
            let mut at = |delta: f64| -> Result<f64> {
                let mut d = orig.clone();
                d[j] += delta;
                params(model)[k].assign(d)?;
                Ok(project(&no_grad(|| eval(model))?, &w))
            };
            let numeric = (at(H)? - at(-H)?) / (2.0 * H);
            params(model)[k].assign(orig.clone())?;
            worst = worst.max(grad_error(analytic[k][j], numeric));
        }
    }
    Ok(worst)
}

/// Singular values from nalgebra's dense SVD, descending.
pub fn svd_oracle(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let m = nalgebra::DMatrix::from_row_slice(rows, cols, data);
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Row-major `[n,k]·[k,m]`.
pub fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a[i * k + t] * b[t * m + j]).sum();
        }
    }
    out
}

/// Single-head scaled dot-product attention over `[n,d]`, one query row at
/// a time, with optional key mask.
pub fn naive_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, mask: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| {
                let s: f64 = (0..d).map(|t| q[i * d + t] * k[j * d + t]).sum::<f64>() / (d as f64).sqrt();
                match mask {
                    Some(m) if m[j] == 0.0 => f64::NEG_INFINITY,
                    _ => s,
                }
            })
            .collect();
        let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..n {
            for t in 0..d {
                out[i * d + t] += e[j] / z * v[j * d + t];
            }
        }
    }
    out
}

pub fn uniform_usize(rng: &mut ModelRng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}
