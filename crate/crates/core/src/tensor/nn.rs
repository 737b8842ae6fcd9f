//! Fused normalisation, pooling and loss operations.

use super::ops::axis_split;
use super::Tensor;
use crate::error::{Error, Result};

/// Relative spread below which a row counts as constant in
/// [`Tensor::standardize_last`].
pub const DEGENERATE_SPREAD: f64 = 1e-12;

impl Tensor {
    /// Exponentiate-and-normalise along `axis` with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::InvalidShape {
                shape: self.shape().to_vec(),
                reason: format!("no axis {axis}"),
            });
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for l in 0..len {
                    let e = (x[at(l)] - mx).exp();
                    y[at(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    y[at(l)] /= s;
                }
            }
        }
        Ok(Tensor::from_op(y, self.shape().to_vec(), &[self], move |args| {
            let (y, g) = (args.out, args.grad);
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Weighted mean negative log-likelihood of `targets` under the
    /// last-axis softmax of `self`. Rows with zero weight are ignored.
    pub fn cross_entropy(&self, targets: &[usize], weights: Option<&[f64]>) -> Result<Tensor> {
        let c = *self.shape().last().unwrap();
        let rows = self.numel() / c;
        if targets.len() != rows || weights.is_some_and(|w| w.len() != rows) {
            return Err(Error::shape("cross_entropy", self.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Contract(format!("target {bad} out of range for {c} classes")));
        }
        let w: Vec<f64> = weights.map_or_else(|| vec![1.0; rows], <[f64]>::to_vec);
        let total: f64 = w.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateInput("cross entropy over zero weight".into()));
        }
        let x = self.data();
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            loss += w[r] * (lse - row[targets[r]]);
        }
        let targets = targets.to_vec();
        Ok(Tensor::from_op(vec![loss / total], vec![1], &[self], move |args| {
            let scale = args.grad[0] / total;
            let mut g = probs.clone();
            for r in 0..rows {
                g[r * c + targets[r]] -= 1.0;
                let f = scale * w[r];
                g[r * c..(r + 1) * c].iter_mut().for_each(|v| *v *= f);
            }
            vec![Some(g)]
        }))
    }

    fn pool_dims(&self, mask: Option<&[f64]>) -> Result<(usize, usize, usize)> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "pooling expects [batch, seq, feature]".into(),
            });
        }
        if mask.is_some_and(|m| m.len() != s[0] * s[1]) {
            return Err(Error::shape("pool mask", &s[..2], &[mask.unwrap().len()]));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Masked mean over the sequence axis: `[B,N,d]` → `[B,d]`.
    pub fn mean_pool(&self, mask: Option<&[f64]>) -> Result<Tensor> {
        let (b, n, d) = self.pool_dims(mask)?;
        let m: Vec<f64> = mask.map_or_else(|| vec![1.0; b * n], <[f64]>::to_vec);
        let counts: Vec<f64> = (0..b).map(|bi| m[bi * n..(bi + 1) * n].iter().sum()).collect();
        if let Some(bi) = counts.iter().position(|&c| !(c > 0.0)) {
            return Err(Error::DegenerateInput(format!("sample {bi} has no unmasked positions")));
        }
        let x = self.data();
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for ni in 0..n {
                let w = m[bi * n + ni] / counts[bi];
                if w != 0.0 {
                    let src = &x[(bi * n + ni) * d..(bi * n + ni + 1) * d];
                    out[bi * d..(bi + 1) * d].iter_mut().zip(src).for_each(|(o, s)| *o += w * s);
                }
            }
        }
        Ok(Tensor::from_op(out, vec![b, d], &[self], move |args| {
            let mut g = vec![0.0; b * n * d];
            for bi in 0..b {
                for ni in 0..n {
                    let w = m[bi * n + ni] / counts[bi];
                    if w != 0.0 {
                        let src = &args.grad[bi * d..(bi + 1) * d];
                        g[(bi * n + ni) * d..(bi * n + ni + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(o, s)| *o = w * s);
                    }
                }
            }
            vec![Some(g)]
        }))
    }

    /// Masked max over the sequence axis; ties go to the lowest position.
    pub fn max_pool(&self, mask: Option<&[f64]>) -> Result<Tensor> {
        let (b, n, d) = self.pool_dims(mask)?;
        let x = self.data();
        let mut out = vec![0.0; b * d];
        let mut arg = vec![usize::MAX; b * d];
        for bi in 0..b {
            for ni in 0..n {
                if mask.is_some_and(|m| m[bi * n + ni] <= 0.0) {
                    continue;
                }
                for j in 0..d {
                    let v = x[(bi * n + ni) * d + j];
                    let k = bi * d + j;
                    if arg[k] == usize::MAX || v > out[k] {
                        out[k] = v;
                        arg[k] = ni;
                    }
                }
            }
            if arg[bi * d] == usize::MAX {
                return Err(Error::DegenerateInput(format!("sample {bi} has no unmasked positions")));
            }
        }
        Ok(Tensor::from_op(out, vec![b, d], &[self], move |args| {
            let mut g = vec![0.0; b * n * d];
            for bi in 0..b {
                for j in 0..d {
                    let k = bi * d + j;
                    g[(bi * n + arg[k]) * d + j] = args.grad[k];
                }
            }
            vec![Some(g)]
        }))
    }

    /// Normalises every last-axis row to zero mean and unit variance
    /// (no affine part).
    pub fn layer_norm_last(&self, eps: f64) -> Tensor {
        let d = *self.shape().last().unwrap();
        let rows = self.numel() / d;
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                y[r * d + j] = (row[j] - mu) * is;
            }
        }
        Tensor::from_op(y, self.shape().to_vec(), &[self], move |args| {
            let (y, g) = (args.out, args.grad);
            let mut gx = vec![0.0; y.len()];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let yr = &y[r * d..(r + 1) * d];
                let mg = gr.iter().sum::<f64>() / d as f64;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    gx[r * d + j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Min-max rescales every last-axis row onto `[0, 1]`; a constant row
    /// maps to all ones.
    pub fn standardize_last(&self) -> Tensor {
        let d = *self.shape().last().unwrap();
        let rows = self.numel() / d;
        let x = self.data();
        let mut y = vec![1.0; x.len()];
        // (argmin, argmax, spread) per row, spread = 0 for degenerate rows
        let mut meta = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let (mut lo, mut hi) = (0, 0);
            for j in 1..d {
                if row[j] < row[lo] {
                    lo = j;
                }
                if row[j] > row[hi] {
                    hi = j;
                }
            }
            let spread = row[hi] - row[lo];
            let scale = row[hi].abs().max(row[lo].abs());
            if spread <= DEGENERATE_SPREAD * scale || spread == 0.0 {
                meta.push((lo, hi, 0.0));
                continue;
            }
            for j in 0..d {
                y[r * d + j] = (row[j] - row[lo]) / spread;
            }
            // pin the extremes exactly
            y[r * d + lo] = 0.0;
            y[r * d + hi] = 1.0;
            meta.push((lo, hi, spread));
        }
        Tensor::from_op(y, self.shape().to_vec(), &[self], move |args| {
            let (y, g) = (args.out, args.grad);
            let mut gx = vec![0.0; y.len()];
            for (r, &(lo, hi, spread)) in meta.iter().enumerate() {
                if spread == 0.0 {
                    continue;
                }
                let gr = &g[r * d..(r + 1) * d];
                let yr = &y[r * d..(r + 1) * d];
                let mut d_lo = 0.0;
                let mut d_hi = 0.0;
                for j in 0..d {
                    gx[r * d + j] = gr[j] / spread;
                    d_lo += gr[j] * (yr[j] - 1.0) / spread;
                    d_hi -= gr[j] * yr[j] / spread;
                }
                gx[r * d + lo] += d_lo;
                gx[r * d + hi] += d_hi;
            }
            vec![Some(gx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let y = t(&[0.0, 0.0, 0.0], &[3]).softmax(0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = t(&[1.0, 2.0, 3.0], &[3]).softmax(0).unwrap();
        let want = [0.090_030_573_170_380_46, 0.244_728_471_054_797_6, 0.665_240_955_774_821_8];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let a = t(&[1.0; 4], &[4]).softmax(0).unwrap();
        let b = t(&[101.0; 4], &[4]).softmax(0).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn softmax_over_middle_axis_sums_to_one() {
        let x = t(&(0..12).map(|v| (v as f64).sin() * 3.0).collect::<Vec<_>>(), &[2, 3, 2]);
        let y = x.softmax(1).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|l| y.data()[(o * 3 + l) * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_cross_entropy_is_log_classes() {
        let l = t(&[0.3; 8], &[2, 4]).cross_entropy(&[0, 3], None).unwrap();
        assert!((l.item() - 4f64.ln()).abs() < 1e-12);
        assert!((l.item() - 1.386_294).abs() < 1e-6);
    }

    #[test]
    fn mean_pool_constant_sequence() {
        let x = t(&[2.0, -1.0, 2.0, -1.0, 2.0, -1.0], &[1, 3, 2]);
        assert_eq!(x.mean_pool(None).unwrap().data(), &[2.0, -1.0]);
    }

    #[test]
    fn masked_pools_ignore_padding() {
        let x = t(&[1.0, 5.0, 3.0, 100.0], &[1, 4, 1]);
        let mask = [1.0, 1.0, 1.0, 0.0];
        assert_eq!(x.mean_pool(Some(&mask)).unwrap().data(), &[3.0]);
        assert_eq!(x.max_pool(Some(&mask)).unwrap().data(), &[5.0]);
    }

    #[test]
    fn max_pool_ties_route_to_lowest_index() {
        let x = Tensor::parameter(vec![2.0, 2.0, 1.0], &[1, 3, 1]).unwrap();
        x.max_pool(None).unwrap().sum().backward().unwrap();
        assert_eq!(*x.grad().unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let y = t(&[3.0; 4], &[1, 4]).layer_norm_last(1e-5);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn standardize_examples() {
        assert_eq!(t(&[3.0, 1.0, 2.0], &[3]).standardize_last().data(), &[1.0, 0.0, 0.5]);
        assert_eq!(t(&[5.0, 5.0, 5.0], &[3]).standardize_last().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(t(&[-4.0], &[1]).standardize_last().data(), &[1.0]);
    }
}
