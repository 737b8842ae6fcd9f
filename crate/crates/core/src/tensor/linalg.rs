//! Matrix products, LU solves and thin QR, all differentiable.

use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
/// A transposed operand is stored in its untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover the strided extents checked above and `c`
    // does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// Matrix product. Supported layouts:
    /// `[m,k]·[k,n]`, `[B,m,k]·[k,n]` (shared right operand) and
    /// `[B,m,k]·[B,k,n]` (batched).
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        let err = || Error::shape("matmul", sa, sb);
        match (sa.len(), sb.len()) {
            (2, 2) | (3, 2) => {
                let k = *sa.last().unwrap();
                if sb[0] != k {
                    return Err(err());
                }
                let rows = self.numel() / k;
                let n = sb[1];
                let mut out = vec![0.0; rows * n];
                gemm(rows, k, n, self.data(), false, rhs.data(), false, &mut out, false);
                let mut shape = sa.to_vec();
                *shape.last_mut().unwrap() = n;
                Ok(Tensor::from_op(out, shape, &[self, rhs], move |args| {
                    let (a, b) = (&args.inputs[0], &args.inputs[1]);
                    let ga = a.requires_grad().then(|| {
                        let mut g = vec![0.0; rows * k];
                        gemm(rows, n, k, args.grad, false, b.data(), true, &mut g, false);
                        g
                    });
                    let gb = b.requires_grad().then(|| {
                        let mut g = vec![0.0; k * n];
                        gemm(k, rows, n, a.data(), true, args.grad, false, &mut g, false);
                        g
                    });
                    vec![ga, gb]
                }))
            }
            (3, 3) => {
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                if sb[0] != batch || sb[1] != k {
                    return Err(err());
                }
                let n = sb[2];
                let mut out = vec![0.0; batch * m * n];
                for bi in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &self.data()[bi * m * k..],
                        false,
                        &rhs.data()[bi * k * n..],
                        false,
                        &mut out[bi * m * n..],
                        false,
                    );
                }
                Ok(Tensor::from_op(out, vec![batch, m, n], &[self, rhs], move |args| {
                    let (a, b) = (&args.inputs[0], &args.inputs[1]);
                    let g = args.grad;
                    let ga = a.requires_grad().then(|| {
                        let mut ga = vec![0.0; batch * m * k];
                        for bi in 0..batch {
                            gemm(m, n, k, &g[bi * m * n..], false, &b.data()[bi * k * n..], true, &mut ga[bi * m * k..], false);
                        }
                        ga
                    });
                    let gb = b.requires_grad().then(|| {
                        let mut gb = vec![0.0; batch * k * n];
                        for bi in 0..batch {
                            gemm(k, m, n, &a.data()[bi * m * k..], true, &g[bi * m * n..], false, &mut gb[bi * k * n..], false);
                        }
                        gb
                    });
                    vec![ga, gb]
                }))
            }
            _ => Err(err()),
        }
    }

    /// Solves `A·X = B` for square `A` by LU with partial pivoting.
    pub fn linear_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sa[0] != sa[1] || sb.len() != 2 || sb[0] != sa[0] {
            return Err(Error::shape("linear_solve", sa, sb));
        }
        let (n, cols) = (sb[0], sb[1]);
        let lu = Rc::new(lu_factor(a.data(), n)?);
        let x = lu.solve(b.data(), cols);

        let mut ax = vec![0.0; n * cols];
        gemm(n, n, cols, a.data(), false, &x, false, &mut ax, false);
        let resid = ax.iter().zip(b.data()).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        let scale = a.max_abs() * x.iter().fold(0.0f64, |m, v| m.max(v.abs())) + b.max_abs();
        if resid > 1e-8 * scale.max(1.0) {
            return Err(Error::Linalg(format!("solve residual {resid:e} too large")));
        }

        Ok(Tensor::from_op(x, vec![n, cols], &[a, b], move |args| {
            // dB = A^{-T} dX, dA = -dB X^T
            let gb = lu.solve_transpose(args.grad, cols);
            let ga = args.inputs[0].requires_grad().then(|| {
                let mut ga = vec![0.0; n * n];
                gemm(n, cols, n, &gb, false, args.out, true, &mut ga, false);
                ga.iter_mut().for_each(|v| *v = -*v);
                ga
            });
            vec![ga, args.inputs[1].requires_grad().then_some(gb)]
        }))
    }

    /// Thin QR of an `m×n` matrix (`m >= n`) returning `Q` with the sign
    /// convention `diag(R) >= 0`.
    pub fn qr_thin(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || s[0] < s[1] {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "thin QR needs rows >= cols".into(),
            });
        }
        let (m, n) = (s[0], s[1]);
        let (q, r) = householder_qr(self.data(), m, n)?;
        let r = Rc::new(r);
        Ok(Tensor::from_op(q, vec![m, n], &[self], move |args| {
            let q = args.out;
            let dq = args.grad;
            // M = -dQ^T Q, then copy its lower triangle onto the upper one.
            let mut mm = vec![0.0; n * n];
            gemm(n, m, n, dq, true, q, false, &mut mm, false);
            let mut c = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    c[i * n + j] = -if i >= j { mm[i * n + j] } else { mm[j * n + i] };
                }
            }
            let mut y = dq.to_vec();
            gemm(m, n, n, q, false, &c, false, &mut y, true);
            // dA = Y R^{-T}: each row solves R x = y_row.
            let mut da = vec![0.0; m * n];
            for row in 0..m {
                let yr = &y[row * n..(row + 1) * n];
                let xr = &mut da[row * n..(row + 1) * n];
                for i in (0..n).rev() {
                    let mut acc = yr[i];
                    for j in i + 1..n {
                        acc -= r[i * n + j] * xr[j];
                    }
                    xr[i] = acc / r[i * n + i];
                }
            }
            vec![Some(da)]
        }))
    }
}

/// `P·A = L·U` packed in one matrix; `perm[i]` is the source row of row `i`.
#[derive(Debug, Clone)]
pub struct LuFactors {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

pub fn lu_factor(a: &[f64], n: usize) -> Result<LuFactors> {
    let mut lu = a.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let (piv, mag) = (col..n)
            .map(|r| (r, lu[r * n + col].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(mag > 1e-12) {
            return Err(Error::Linalg(format!(
                "singular matrix: pivot {mag:e} in column {col}"
            )));
        }
        if piv != col {
            for j in 0..n {
                lu.swap(col * n + j, piv * n + j);
            }
            perm.swap(col, piv);
        }
        let p = lu[col * n + col];
        for r in col + 1..n {
            let f = lu[r * n + col] / p;
            lu[r * n + col] = f;
            if f != 0.0 {
                for j in col + 1..n {
                    lu[r * n + j] -= f * lu[col * n + j];
                }
            }
        }
    }
    Ok(LuFactors { n, lu, perm })
}

impl LuFactors {
    pub fn determinant(&self) -> f64 {
        let n = self.n;
        let mut det: f64 = (0..n).map(|i| self.lu[i * n + i]).product();
        // parity of the row permutation
        let mut seen = vec![false; n];
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut len = 0;
            let mut i = start;
            while !seen[i] {
                seen[i] = true;
                i = self.perm[i];
                len += 1;
            }
            if len % 2 == 0 {
                det = -det;
            }
        }
        det
    }

    /// Solves `A·X = B` for `B` with `cols` columns.
    pub fn solve(&self, b: &[f64], cols: usize) -> Vec<f64> {
        let n = self.n;
        let lu = &self.lu;
        let mut x = vec![0.0; n * cols];
        for i in 0..n {
            x[i * cols..(i + 1) * cols].copy_from_slice(&b[self.perm[i] * cols..(self.perm[i] + 1) * cols]);
        }
        for i in 0..n {
            for k in 0..i {
                let f = lu[i * n + k];
                if f != 0.0 {
                    for c in 0..cols {
                        x[i * cols + c] -= f * x[k * cols + c];
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let f = lu[i * n + k];
                if f != 0.0 {
                    for c in 0..cols {
                        x[i * cols + c] -= f * x[k * cols + c];
                    }
                }
            }
            let d = lu[i * n + i];
            for c in 0..cols {
                x[i * cols + c] /= d;
            }
        }
        x
    }

    /// Solves `Aᵀ·X = B`.
    pub fn solve_transpose(&self, b: &[f64], cols: usize) -> Vec<f64> {
        let n = self.n;
        let lu = &self.lu;
        // A^T = U^T L^T P, so solve U^T z = b, L^T w = z, x = P^T w.
        let mut w = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                let f = lu[k * n + i];
                if f != 0.0 {
                    for c in 0..cols {
                        w[i * cols + c] -= f * w[k * cols + c];
                    }
                }
            }
            let d = lu[i * n + i];
            for c in 0..cols {
                w[i * cols + c] /= d;
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let f = lu[k * n + i];
                if f != 0.0 {
                    for c in 0..cols {
                        w[i * cols + c] -= f * w[k * cols + c];
                    }
                }
            }
        }
        let mut x = vec![0.0; n * cols];
        for i in 0..n {
            x[self.perm[i] * cols..(self.perm[i] + 1) * cols].copy_from_slice(&w[i * cols..(i + 1) * cols]);
        }
        x
    }
}

/// Householder thin QR; returns row-major `Q (m×n)` and `R (n×n)`.
fn householder_qr(a: &[f64], m: usize, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut w = a.to_vec();
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let frob = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    for j in 0..n {
        let norm = (j..m).map(|i| w[i * n + j].powi(2)).sum::<f64>().sqrt();
        let mut v: Vec<f64> = (j..m).map(|i| w[i * n + j]).collect();
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vn > 0.0 {
            v.iter_mut().for_each(|x| *x /= vn);
            for c in j..n {
                let dot: f64 = (j..m).map(|i| v[i - j] * w[i * n + c]).sum();
                for i in j..m {
                    w[i * n + c] -= 2.0 * v[i - j] * dot;
                }
            }
        }
        vs.push(v);
    }
    let mut r = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            r[i * n + j] = w[i * n + j];
        }
    }
    let tol = 1e-10 * frob.max(f64::MIN_POSITIVE);
    if let Some(i) = (0..n).find(|&i| r[i * n + i].abs() <= tol) {
        return Err(Error::Linalg(format!(
            "rank-deficient matrix: |R[{i},{i}]| = {:e}",
            r[i * n + i].abs()
        )));
    }
    let mut q = vec![0.0; m * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    for (j, v) in vs.iter().enumerate().rev() {
        for c in 0..n {
            let dot: f64 = (j..m).map(|i| v[i - j] * q[i * n + c]).sum();
            if dot != 0.0 {
                for i in j..m {
                    q[i * n + c] -= 2.0 * v[i - j] * dot;
                }
            }
        }
    }
    for i in 0..n {
        if r[i * n + i] < 0.0 {
            for j in i..n {
                r[i * n + j] = -r[i * n + j];
            }
            for row in 0..m {
                q[row * n + i] = -q[row * n + i];
            }
        }
    }
    Ok((q, r))
}
