//! Elementwise arithmetic, activations, reductions and layout operations.

use super::Tensor;
use crate::error::{Error, Result};

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// How `rhs` is read while walking `lhs` in row-major order under
/// broadcasting: per-axis extents of `lhs` and strides into `rhs` (0 on
/// broadcast axes).
#[derive(Debug, Clone)]
struct Broadcast {
    shape: Vec<usize>,
    strides: Vec<usize>,
}

impl Broadcast {
    /// `None` when the shapes are identical.
    fn new(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Option<Self>> {
        if lhs == rhs {
            return Ok(None);
        }
        if lhs.len() != rhs.len() || lhs.iter().zip(rhs).any(|(&a, &b)| b != a && b != 1) {
            return Err(Error::shape(op, lhs, rhs));
        }
        let mut strides = vec![0usize; rhs.len()];
        let mut acc = 1;
        for ax in (0..rhs.len()).rev() {
            strides[ax] = if rhs[ax] == 1 { 0 } else { acc };
            acc *= rhs[ax];
        }
        Ok(Some(Self { shape: lhs.to_vec(), strides }))
    }

    /// Flat `rhs` index for each flat `lhs` index, computed as an odometer
    /// so no index table is materialised.
    fn indices(&self) -> BroadcastIndices<'_> {
        let remaining = if self.shape.is_empty() { 1 } else { self.shape.iter().product() };
        BroadcastIndices { b: self, counter: vec![0; self.shape.len()], offset: 0, remaining }
    }
}

struct BroadcastIndices<'a> {
    b: &'a Broadcast,
    counter: Vec<usize>,
    offset: usize,
    remaining: usize,
}

impl Iterator for BroadcastIndices<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let out = self.offset;
        for ax in (0..self.counter.len()).rev() {
            self.counter[ax] += 1;
            self.offset += self.b.strides[ax];
            if self.counter[ax] < self.b.shape[ax] {
                break;
            }
            self.offset -= self.b.strides[ax] * self.b.shape[ax];
            self.counter[ax] = 0;
        }
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

fn reduce_to(b: &Broadcast, g: &[f64], n: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (i, j) in b.indices().enumerate() {
        out[j] += g[i] * f(i);
    }
    out
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Tensor {
    fn binary(&self, rhs: &Tensor, kind: Binary) -> Result<Tensor> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let map = Broadcast::new(name, self.shape(), rhs.shape())?;
        let a = self.data();
        let b = rhs.data();
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let data: Vec<f64> = match &map {
            None => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            // a scalar rhs skips the index walk
            Some(_) if b.len() == 1 => a.iter().map(|&x| f(x, b[0])).collect(),
            Some(m) => a.iter().zip(m.indices()).map(|(&x, j)| f(x, b[j])).collect(),
        };
        let rhs_n = rhs.numel();
        Ok(Tensor::from_op(data, self.shape().to_vec(), &[self, rhs], move |args| {
            let g = args.grad;
            let (x, y) = (&args.inputs[0], &args.inputs[1]);
            let ga = x.requires_grad().then(|| match kind {
                Binary::Add | Binary::Sub => g.to_vec(),
                Binary::Mul => {
                    let yd = y.data();
                    match &map {
                        None => g.iter().zip(yd).map(|(g, y)| g * y).collect(),
                        Some(m) => g.iter().zip(m.indices()).map(|(g, j)| g * yd[j]).collect(),
                    }
                }
            });
            let gb = y.requires_grad().then(|| {
                let sign = if matches!(kind, Binary::Sub) { -1.0 } else { 1.0 };
                match (&map, kind) {
                    (None, Binary::Mul) => g.iter().zip(x.data()).map(|(g, x)| g * x).collect(),
                    (None, _) => g.iter().map(|g| sign * g).collect(),
                    (Some(m), Binary::Mul) => {
                        let xd = x.data();
                        reduce_to(m, g, rhs_n, |i| xd[i])
                    }
                    (Some(m), _) => reduce_to(m, g, rhs_n, |_| sign),
                }
            });
            vec![ga, gb]
        }))
    }

    /// Elementwise sum; `rhs` may broadcast along axes where its extent is 1.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Mul)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), &[self], move |args| {
            vec![Some(args.grad.iter().map(|g| g * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(data, self.shape().to_vec(), &[self], |args| {
            vec![Some(args.grad.to_vec())]
        })
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(data, self.shape().to_vec(), &[self], move |args| {
            let x = args.inputs[0].data();
            let g = args
                .grad
                .iter()
                .zip(x)
                .zip(args.out)
                .map(|((g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(g)]
        })
    }

    /// x for x > 0, exp(x) − 1 otherwise.
    pub fn elu(&self) -> Tensor {
        self.unary(
            |x| if x > 0.0 { x } else { x.exp_m1() },
            |x, y| if x > 0.0 { 1.0 } else { y + 1.0 },
        )
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let s = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![1], &[self], move |args| {
            vec![Some(vec![args.grad[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Sums out `axis`; a rank-1 input reduces to shape `[1]`.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::InvalidShape {
                shape: self.shape().to_vec(),
                reason: format!("no axis {axis}"),
            });
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut shape: Vec<usize> = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op(out, shape, &[self], move |args| {
            let mut g = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    g[(o * len + l) * inner..(o * len + l + 1) * inner]
                        .copy_from_slice(&args.grad[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(g)]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = super::check_shape(shape)?;
        if n != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), &[self], |args| {
            vec![Some(args.grad.to_vec())]
        }))
    }

    /// Swaps the last two axes (rank 2 or 3).
    pub fn transpose(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "transpose needs rank >= 2".into(),
            });
        }
        let r = shape.len();
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let batch = self.numel() / (rows * cols);
        let out = transpose_blocks(self.data(), batch, rows, cols);
        let mut new_shape = shape.to_vec();
        new_shape.swap(r - 2, r - 1);
        Ok(Tensor::from_op(out, new_shape, &[self], move |args| {
            vec![Some(transpose_blocks(args.grad, batch, cols, rows))]
        }))
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let lead = &first.shape()[..first.rank() - 1];
        for p in parts {
            if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(Tensor::from_op(out, shape, parts, move |args| {
            let mut grads: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
            for r in 0..rows {
                let mut off = r * total;
                for (g, &w) in grads.iter_mut().zip(&widths) {
                    g.extend_from_slice(&args.grad[off..off + w]);
                    off += w;
                }
            }
            grads
                .into_iter()
                .zip(args.inputs)
                .map(|(g, t)| t.requires_grad().then_some(g))
                .collect()
        }))
    }

    /// Columns `[start, end)` of the last axis.
    pub fn slice_last(&self, start: usize, end: usize) -> Result<Tensor> {
        let w = *self.shape().last().unwrap();
        if start >= end || end > w {
            return Err(Error::InvalidShape {
                shape: self.shape().to_vec(),
                reason: format!("slice {start}..{end} out of range"),
            });
        }
        let rows = self.numel() / w;
        let k = end - start;
        let x = self.data();
        let mut out = Vec::with_capacity(rows * k);
        for r in 0..rows {
            out.extend_from_slice(&x[r * w + start..r * w + end]);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = k;
        Ok(Tensor::from_op(out, shape, &[self], move |args| {
            let mut g = vec![0.0; rows * w];
            for r in 0..rows {
                g[r * w + start..r * w + end].copy_from_slice(&args.grad[r * k..(r + 1) * k]);
            }
            vec![Some(g)]
        }))
    }

    /// Looks up rows of a `[V, k]` table; the result has shape `lead ++ [k]`.
    pub fn gather_rows(&self, ids: &[usize], lead: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: self.shape().to_vec(),
                reason: "gather_rows needs a rank-2 table".into(),
            });
        }
        if lead.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("gather_rows", lead, &[ids.len()]));
        }
        let (v, k) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocabulary { id: bad, vocab_size: v });
        }
        let table = self.data();
        let mut out = Vec::with_capacity(ids.len() * k);
        for &i in ids {
            out.extend_from_slice(&table[i * k..(i + 1) * k]);
        }
        let mut shape = lead.to_vec();
        shape.push(k);
        let ids = ids.to_vec();
        Ok(Tensor::from_op(out, shape, &[self], move |args| {
            let mut g = vec![0.0; v * k];
            for (r, &i) in ids.iter().enumerate() {
                let src = &args.grad[r * k..(r + 1) * k];
                g[i * k..(i + 1) * k].iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
            vec![Some(g)]
        }))
    }

    /// `[B, N, H*dh]` → `[B*H, N, dh]`.
    pub fn split_heads(&self, heads: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || s[2] % heads != 0 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: format!("cannot split into {heads} heads"),
            });
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let out = permute_heads(self.data(), b, n, heads, dh, true);
        Ok(Tensor::from_op(out, vec![b * heads, n, dh], &[self], move |args| {
            vec![Some(permute_heads(args.grad, b, n, heads, dh, false))]
        }))
    }

    /// Inverse of [`Tensor::split_heads`].
    pub fn merge_heads(&self, heads: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || s[0] % heads != 0 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: format!("cannot merge {heads} heads"),
            });
        }
        let (bh, n, dh) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let out = permute_heads(self.data(), b, n, heads, dh, false);
        Ok(Tensor::from_op(out, vec![b, n, heads * dh], &[self], move |args| {
            vec![Some(permute_heads(args.grad, b, n, heads, dh, true))]
        }))
    }
}

pub(crate) fn transpose_blocks(x: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let off = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[off + j * rows + i] = x[off + i * cols + j];
            }
        }
    }
    out
}

/// Moves between `[b, n, h, dh]` (merged) and `[b, h, n, dh]` (split) layouts.
fn permute_heads(x: &[f64], b: usize, n: usize, h: usize, dh: usize, to_split: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ni in 0..n {
            for hi in 0..h {
                let merged = ((bi * n + ni) * h + hi) * dh;
                let split = ((bi * h + hi) * n + ni) * dh;
                let (src, dst) = if to_split { (merged, split) } else { (split, merged) };
                out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
    out
}
