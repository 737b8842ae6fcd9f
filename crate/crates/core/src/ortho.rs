//! Orthogonal and semi-orthogonal parametrisations.
//!
//! The constraint lives in the map, not in the optimiser: any raw matrix is
//! valid, and every read goes through the Cayley map (square case) or a
//! sign-normalised thin QR (rectangular case).

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::param::{normal, ModelRng, Param};
use crate::tensor::{grad_enabled, Tensor};

/// Cayley map of the skew-symmetric part of `raw`:
/// `A = (raw − rawᵀ)/2`, `Q = (I + A)⁻¹(I − A)`.
pub fn orthogonalize(raw: &Tensor) -> Result<Tensor> {
    let s = raw.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "orthogonalize needs a square matrix".into(),
        });
    }
    let eye = Tensor::eye(s[0]);
    let skew = raw.sub(&raw.transpose()?)?.scale(0.5);
    // (I − A) and (I + A)⁻¹ commute, so the left solve gives the same Q.
    Tensor::linear_solve(&eye.add(&skew)?, &eye.sub(&skew)?)
}

/// Thin QR factor of a `v×k` matrix (`v ≥ k`) with non-negative `diag(R)`.
pub fn semi_orthogonalize(raw: &Tensor) -> Result<Tensor> {
    let s = raw.shape();
    if s.len() != 2 || s[0] < s[1] {
        return Err(Error::Precondition(format!(
            "semi_orthogonalize needs rows >= cols, got {s:?}"
        )));
    }
    raw.qr_thin()
}

/// `‖QᵀQ − I‖_max` for a matrix with (intended) orthonormal columns.
pub fn orthogonality_error(q: &Tensor) -> f64 {
    let (m, n) = (q.shape()[0], q.shape()[1]);
    let d = q.data();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = (0..m).map(|r| d[r * n + i] * d[r * n + j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

/// Caches the derived matrix against the raw leaf it was computed from.
#[derive(Debug, Default)]
struct DerivedCache(RefCell<Option<(Tensor, Tensor)>>);

impl Clone for DerivedCache {
    fn clone(&self) -> Self {
        Self::default()
    }
}

impl DerivedCache {
    fn get_or(&self, raw: &Tensor, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
        if let Some((src, q)) = self.0.borrow().as_ref() {
            // a value computed without a graph cannot serve a recording pass
            if src.same_storage(raw) && (q.requires_grad() || !grad_enabled()) {
                return Ok(q.clone());
            }
        }
        let q = f(raw)?;
        *self.0.borrow_mut() = Some((raw.clone(), q.clone()));
        Ok(q)
    }

    fn is_fresh(&self, raw: &Tensor) -> bool {
        self.0
            .borrow()
            .as_ref()
            .is_some_and(|(src, _)| src.same_storage(raw))
    }
}

/// A learnable `d×d` rotation.
#[derive(Debug, Clone)]
pub struct OrthogonalParam {
    raw: Param,
    cache: DerivedCache,
}

impl OrthogonalParam {
    pub fn from_raw(name: impl Into<String>, raw: Vec<f64>, d: usize) -> Result<Self> {
        Ok(Self {
            raw: Param::new(name, raw, &[d, d])?,
            cache: DerivedCache::default(),
        })
    }

    /// Raw entries drawn from `N(0, std²)`.
    pub fn random(name: impl Into<String>, d: usize, std: f64, rng: &mut ModelRng) -> Result<Self> {
        Self::from_raw(name, normal(rng, d * d, std), d)
    }

    /// Zero raw matrix, whose Cayley image is the identity.
    pub fn identity(name: impl Into<String>, d: usize) -> Result<Self> {
        Self::from_raw(name, vec![0.0; d * d], d)
    }

    pub fn dim(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn raw(&self) -> &Param {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut Param {
        &mut self.raw
    }

    /// `true` while the cached matrix matches the current raw value.
    pub fn is_cached(&self) -> bool {
        self.cache.is_fresh(self.raw.tensor())
    }

    /// The orthogonal matrix, recomputed at most once per raw value.
    pub fn matrix(&self) -> Result<Tensor> {
        self.cache.get_or(self.raw.tensor(), orthogonalize)
    }
}

/// A learnable `v×k` matrix with orthonormal columns when `v ≥ k`, or
/// orthonormal rows when `v < k`.
#[derive(Debug, Clone)]
pub struct SemiOrthogonalParam {
    raw: Param,
    cache: DerivedCache,
}

impl SemiOrthogonalParam {
    pub fn from_raw(name: impl Into<String>, raw: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        Ok(Self {
            raw: Param::new(name, raw, &[rows, cols])?,
            cache: DerivedCache::default(),
        })
    }

    pub fn random(name: impl Into<String>, rows: usize, cols: usize, rng: &mut ModelRng) -> Result<Self> {
        Self::from_raw(name, normal(rng, rows * cols, 1.0), rows, cols)
    }

    pub fn raw(&self) -> &Param {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut Param {
        &mut self.raw
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.raw.shape()[0], self.raw.shape()[1])
    }

    /// Whether the orthonormal vectors are the rows (tall vocabularies use
    /// columns).
    pub fn row_orthonormal(&self) -> bool {
        let (v, k) = self.shape();
        v < k
    }

    pub fn matrix(&self) -> Result<Tensor> {
        let rows = self.row_orthonormal();
        self.cache.get_or(self.raw.tensor(), |raw| {
            if rows {
                semi_orthogonalize(&raw.transpose()?)?.transpose()
            } else {
                semi_orthogonalize(raw)
            }
        })
    }

    /// `‖QᵀQ − I‖_max` over the orthonormal direction.
    pub fn orthogonality_error(&self) -> Result<f64> {
        let q = self.matrix()?;
        Ok(if self.row_orthonormal() {
            orthogonality_error(&q.transpose()?)
        } else {
            orthogonality_error(&q)
        })
    }
}
