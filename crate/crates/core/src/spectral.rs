//! Gram spectra of the initial embeddings, plus runnable checks of the
//! linear activation bound and the stochastic dominant eigenvalue.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::ortho::OrthogonalParam;
use crate::param::{uniform, ModelRng};
use crate::tensor::Tensor;

/// How the eigenvalue diagonal is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    Approximated,
    Random,
}

/// `x0ᵀ·x0` for `[N,d]` input, or per sample for `[B,N,d]`.
pub fn gram(x0: &Tensor) -> Result<Tensor> {
    if !matches!(x0.rank(), 2 | 3) {
        return Err(Error::InvalidShape {
            shape: x0.shape().to_vec(),
            reason: "gram expects [N,d] or [B,N,d]".into(),
        });
    }
    x0.transpose()?.matmul(x0)
}

#[derive(Debug, Clone)]
pub struct EigenApprox {
    /// `diag(QᵀgQ)`, shape `[d]` or `[B,d]`.
    pub sigma_raw: Tensor,
    /// `‖g − Q·diag(σ)·Qᵀ‖²_F`, averaged over the batch.
    pub recon_loss: Tensor,
}

/// Approximate eigenvalues of the symmetric `g` in the basis of `u`.
///
/// `sigma_raw` carries gradients into both `g` and `u`. The reconstruction
/// loss sees `g` detached, so it trains the basis only.
pub fn approx_eigen(g: &Tensor, u: &OrthogonalParam) -> Result<EigenApprox> {
    let single = g.rank() == 2;
    let d = u.dim();
    let g3 = if single { g.reshape(&[1, d, d])? } else { g.clone() };
    let s = g3.shape();
    if s.len() != 3 || s[1] != d || s[2] != d {
        return Err(Error::shape("approx_eigen", g.shape(), &[d, d]));
    }
    let batch = s[0];
    let q = u.matrix()?;
    // QᵀgQ = (gQ)ᵀQ for symmetric g
    let rotate = |g: &Tensor| g.matmul(&q)?.transpose()?.matmul(&q);
    let eye = Tensor::eye(d).reshape(&[1, d, d])?;
    let off = Tensor::full(&[1, d, d], 1.0)?.sub(&eye)?;

    let r = rotate(&g3)?;
    let sigma_raw = r.mul(&eye)?.sum_axis(2)?;
    let r_fixed = if g3.requires_grad() { rotate(&g3.detach())? } else { r };
    // orthogonal invariance: the residual is the off-diagonal mass of QᵀgQ
    let recon_loss = r_fixed.mul(&off)?.square().sum().scale(1.0 / batch as f64);

    let sigma_raw = if single { sigma_raw.reshape(&[d])? } else { sigma_raw };
    Ok(EigenApprox { sigma_raw, recon_loss })
}

/// Min-max rescaling onto `[0,1]` along the last axis; a constant row maps
/// to all ones.
pub fn standardize(sigma_raw: &Tensor) -> Tensor {
    sigma_raw.standardize_last()
}

/// The raw uniform draws behind [`random_sigma`].
pub fn random_sigma_raw(d: usize, seed: u64) -> Vec<f64> {
    uniform(&mut ModelRng::seed_from_u64(seed), d, 0.0, 1.0)
}

/// A seeded random spectrum, standardized.
pub fn random_sigma(d: usize, seed: u64) -> Result<Tensor> {
    Ok(standardize(&Tensor::new(random_sigma_raw(d, seed), &[d])?))
}

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 100_000;

fn matvec(a: &[f64], rows: usize, cols: usize, x: &[f64], transpose: bool) -> Vec<f64> {
    if transpose {
        let mut y = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                y[c] += a[r * cols + c] * x[r];
            }
        }
        y
    } else {
        (0..rows)
            .map(|r| (0..cols).map(|c| a[r * cols + c] * x[c]).sum())
            .collect()
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn matrix_dims(m: &Tensor, op: &str) -> Result<(usize, usize)> {
    match m.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("{op} expects a matrix"),
        }),
    }
}

/// Top singular value by power iteration on `WᵀW`.
pub fn top_singular_value(w: &Tensor) -> Result<f64> {
    let (m, n) = matrix_dims(w, "top_singular_value")?;
    let a = w.data();
    // a fixed, generic start vector keeps the result deterministic
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i * 7 + 3) % 11) as f64).collect();
    for _ in 0..POWER_MAX_ITERS {
        let nx = norm(&x);
        if nx == 0.0 {
            return Ok(0.0);
        }
        x.iter_mut().for_each(|v| *v /= nx);
        let y = matvec(a, m, n, &matvec(a, m, n, &x, false), true);
        let lam: f64 = y.iter().zip(&x).map(|(p, q)| p * q).sum();
        // the step between Rayleigh quotients stalls long before the error
        // does when the top two singular values are close; the residual
        // does not
        let resid = norm(&y.iter().zip(&x).map(|(p, q)| p - lam * q).collect::<Vec<_>>());
        if resid <= POWER_TOL * lam.abs().max(1e-300) {
            return Ok(lam.max(0.0).sqrt());
        }
        x = y;
    }
    Err(Error::Numeric(format!(
        "power iteration on WᵀW did not converge in {POWER_MAX_ITERS} iterations"
    )))
}

/// Sampled `max ‖W·x‖₂` over random unit `x`, next to the power-iteration
/// `σ₁`. The sample is a lower bound on `σ₁`.
pub fn check_linear_activation_bound(w: &Tensor, trials: usize, seed: u64) -> Result<(f64, f64)> {
    if trials < 100 {
        return Err(Error::Precondition(format!("need at least 100 trials, got {trials}")));
    }
    let (m, n) = matrix_dims(w, "check_linear_activation_bound")?;
    let sigma1 = top_singular_value(w)?;
    let mut rng = ModelRng::seed_from_u64(seed);
    let mut best = 0.0f64;
    for _ in 0..trials {
        let mut x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let nx = norm(&x);
        x.iter_mut().for_each(|v| *v /= nx);
        best = best.max(norm(&matvec(w.data(), m, n, &x, false)));
    }
    if best > sigma1 + 1e-8 {
        return Err(Error::Numeric(format!(
            "sampled bound {best} exceeds sigma1 {sigma1}"
        )));
    }
    Ok((best, sigma1))
}

/// Dominant eigenvalue magnitude of a column-stochastic matrix.
pub fn check_stochastic_eigenvalue(m: &Tensor) -> Result<f64> {
    let (r, c) = matrix_dims(m, "check_stochastic_eigenvalue")?;
    if r != c {
        return Err(Error::Precondition(format!("matrix is {r}×{c}, not square")));
    }
    let a = m.data();
    if let Some(v) = a.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Precondition(format!("negative or NaN entry {v}")));
    }
    for col in 0..c {
        let s: f64 = (0..r).map(|row| a[row * c + col]).sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!("column {col} sums to {s}")));
        }
    }
    let mut x: Vec<f64> = (0..r).map(|i| 1.0 + 0.1 * ((i * 5 + 1) % 7) as f64).collect();
    let mut lam = f64::NAN;
    for _ in 0..POWER_MAX_ITERS {
        let nx = norm(&x);
        x.iter_mut().for_each(|v| *v /= nx);
        let y = matvec(a, r, c, &x, false);
        let next = norm(&y);
        if (next - lam).abs() <= 1e-14 {
            return Ok(next);
        }
        lam = next;
        x = y;
    }
    Err(Error::Numeric("stochastic power iteration did not converge".into()))
}
