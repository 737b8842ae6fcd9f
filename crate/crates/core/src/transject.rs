//! The TransJect encoder: injective concatenated embedding, orthogonal
//! attention over a once-computed spectrum, ReZero-weighted residual
//! experts mixed by a per-sample gate, and an orthogonal residual FFN.

use std::cell::Cell;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_tokens, positional_block, sinusoidal_table, ForwardOutput, Head, Pooling, Task, TokenBatch};
use crate::ortho::{OrthogonalParam, SemiOrthogonalParam};
use crate::param::{ModelRng, Param};
use crate::spectral::{approx_eigen, gram, random_sigma_raw, standardize, SigmaMode};
use crate::tensor::Tensor;

/// Pre-sigmoid value of every residual weight at initialisation
/// (`sigmoid(−6) ≈ 0.0025`).
pub const RESIDUAL_INIT: f64 = -6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransJectConfig {
    pub layers: usize,
    pub d_model: usize,
    pub experts: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub sigma_mode: SigmaMode,
    pub recon_weight: f64,
    pub task: Task,
    #[serde(default)]
    pub pooling: Pooling,
    /// Reuse the attention residual weight inside the FFN sublayer.
    #[serde(default)]
    pub tie_orf_residual: bool,
    pub seed: u64,
}

impl TransJectConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers < 3 {
            return fail(format!("layers must be at least 3, got {}", self.layers));
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return fail(format!("d_model must be even and positive, got {}", self.d_model));
        }
        if self.experts == 0 {
            return fail("experts must be at least 1".into());
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return fail("vocab_size and max_len must be positive".into());
        }
        if !(self.recon_weight >= 0.0) {
            return fail(format!("recon_weight must be >= 0, got {}", self.recon_weight));
        }
        if let Task::Classification { classes: 0 } = self.task {
            return fail("classification needs at least one class".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub u: Vec<OrthogonalParam>,
    pub v: Vec<OrthogonalParam>,
    pub residual: Param,
    pub gate_w: Param,
    pub w1: OrthogonalParam,
    pub w2: OrthogonalParam,
    pub b1: Param,
    pub b2: Param,
    /// `None` when tied to `residual`.
    pub ffn_residual: Option<Param>,
}

impl LayerParams {
    fn new(l: usize, d: usize, experts: usize, tie: bool, rng: &mut ModelRng) -> Result<Self> {
        let std = 1.0 / (d as f64).sqrt();
        let mut u = Vec::with_capacity(experts);
        let mut v = Vec::with_capacity(experts);
        for e in 0..experts {
            u.push(OrthogonalParam::random(format!("layer{l}.expert{e}.u"), d, std, rng)?);
            v.push(OrthogonalParam::random(format!("layer{l}.expert{e}.v"), d, std, rng)?);
        }
        Ok(Self {
            u,
            v,
            residual: Param::new(format!("layer{l}.residual"), vec![RESIDUAL_INIT], &[1])?,
            gate_w: Param::new(format!("layer{l}.gate_w"), vec![0.0; d * experts], &[d, experts])?,
            w1: OrthogonalParam::random(format!("layer{l}.ffn.w1"), d, std, rng)?,
            w2: OrthogonalParam::random(format!("layer{l}.ffn.w2"), d, std, rng)?,
            b1: Param::new(format!("layer{l}.ffn.b1"), vec![0.0; d], &[d])?,
            b2: Param::new(format!("layer{l}.ffn.b2"), vec![0.0; d], &[d])?,
            ffn_residual: if tie {
                None
            } else {
                Some(Param::new(format!("layer{l}.ffn.residual"), vec![RESIDUAL_INIT], &[1])?)
            },
        })
    }

    pub fn experts(&self) -> usize {
        self.u.len()
    }

    /// Effective attention residual weight `sigmoid(α̂)`.
    pub fn alpha(&self) -> f64 {
        sigmoid(self.residual.data()[0])
    }

    pub fn ffn_alpha(&self) -> f64 {
        sigmoid(self.ffn_residual.as_ref().unwrap_or(&self.residual).data()[0])
    }

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for (u, v) in self.u.iter().zip(&self.v) {
            out.push(u.raw());
            out.push(v.raw());
        }
        out.extend([&self.residual, &self.gate_w, self.w1.raw(), self.w2.raw(), &self.b1, &self.b2]);
        out.extend(self.ffn_residual.as_ref());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for (u, v) in self.u.iter_mut().zip(self.v.iter_mut()) {
            out.push(u.raw_mut());
            out.push(v.raw_mut());
        }
        out.extend([
            &mut self.residual,
            &mut self.gate_w,
            self.w1.raw_mut(),
            self.w2.raw_mut(),
            &mut self.b1,
            &mut self.b2,
        ]);
        out.extend(self.ffn_residual.as_mut());
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Brings a spectrum of shape `[d]` or `[B,d]` to a broadcastable `[·,1,d]`.
fn sigma_rows(sigma: &Tensor) -> Result<Tensor> {
    match sigma.shape() {
        &[d] => sigma.reshape(&[1, 1, d]),
        &[b, d] => sigma.reshape(&[b, 1, d]),
        &[_, 1, _] => Ok(sigma.clone()),
        s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "sigma must be [d] or [B,d]".into(),
        }),
    }
}

/// `x·Q_u·diag(σ)·Q_v` for `x` of shape `[B,N,d]`.
pub fn orthogonal_attention(x: &Tensor, qu: &Tensor, qv: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    x.matmul(qu)?.mul(&sigma_rows(sigma)?)?.matmul(qv)
}

/// `x + (α/L)·elu(attention)` for one expert; `alpha_raw` is pre-sigmoid.
pub fn expert_branch(
    x: &Tensor,
    qu: &Tensor,
    qv: &Tensor,
    sigma: &Tensor,
    alpha_raw: &Tensor,
    layers: usize,
) -> Result<Tensor> {
    let f = orthogonal_attention(x, qu, qv, sigma)?.elu();
    x.add(&f.mul(&residual_scale(alpha_raw, layers)?)?)
}

fn residual_scale(alpha_raw: &Tensor, layers: usize) -> Result<Tensor> {
    alpha_raw.sigmoid().scale(1.0 / layers as f64).reshape(&[1, 1, 1])
}

/// Per-sample expert weights `softmax(mean_pool(x)·gate_w)`, shape `[B,E]`.
pub fn gate(x: &Tensor, gate_w: &Tensor, mask: Option<&[f64]>) -> Result<Tensor> {
    x.mean_pool(mask)?.matmul(gate_w)?.softmax(1)
}

/// `Σ_e λ_e · branch_e` with `λ` of shape `[B,E]` (or `[E]` for one sample).
pub fn moe_combine(branches: &[Tensor], lambda: &Tensor) -> Result<Tensor> {
    let e = branches.len();
    let lam = if lambda.rank() == 1 { lambda.reshape(&[1, lambda.numel()])? } else { lambda.clone() };
    if lam.rank() != 2 || lam.shape()[1] != e || e == 0 {
        return Err(Error::shape("moe_combine", lambda.shape(), &[e]));
    }
    let b = lam.shape()[0];
    for (row, w) in lam.data().chunks(e).enumerate() {
        let s: f64 = w.iter().sum();
        if w.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!(
                "gate weights of sample {row} are not a convex combination: {w:?}"
            )));
        }
    }
    let mut acc: Option<Tensor> = None;
    for (k, branch) in branches.iter().enumerate() {
        let w = lam.slice_last(k, k + 1)?.reshape(&[b, 1, 1])?;
        let term = branch.mul(&w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    Ok(acc.expect("at least one expert"))
}

/// Orthogonal residual FFN `x + (α/L)·elu(elu(x·W₁ + b₁)·W₂ + b₂)`.
pub fn orf(
    x: &Tensor,
    w1: &Tensor,
    w2: &Tensor,
    b1: &Tensor,
    b2: &Tensor,
    alpha_raw: &Tensor,
    layers: usize,
) -> Result<Tensor> {
    let d = b1.numel();
    let h = x.matmul(w1)?.add(&b1.reshape(&[1, 1, d])?)?.elu();
    let h = h.matmul(w2)?.add(&b2.reshape(&[1, 1, d])?)?.elu();
    x.add(&h.mul(&residual_scale(alpha_raw, layers)?)?)
}

#[derive(Debug, Clone)]
pub struct TransJect {
    cfg: TransJectConfig,
    emb: SemiOrthogonalParam,
    pe: Vec<f64>,
    u_basis: OrthogonalParam,
    sigma_raw: Option<Param>,
    layers: Vec<LayerParams>,
    head: Head,
    spectral_evals: Cell<usize>,
}

impl TransJect {
    pub fn new(cfg: TransJectConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ModelRng::seed_from_u64(cfg.seed);
        let (d, half) = (cfg.d_model, cfg.d_model / 2);
        let emb = SemiOrthogonalParam::random("embedding", cfg.vocab_size, half, &mut rng)?;
        let u_basis = OrthogonalParam::random("spectral.u", d, 1.0 / (d as f64).sqrt(), &mut rng)?;
        let sigma_raw = match cfg.sigma_mode {
            SigmaMode::Approximated => None,
            SigmaMode::Random => Some(Param::new(
                "spectral.sigma",
                random_sigma_raw(d, cfg.seed.wrapping_add(1)),
                &[d],
            )?),
        };
        let layers = (0..cfg.layers)
            .map(|l| LayerParams::new(l, d, cfg.experts, cfg.tie_orf_residual, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Head::new(cfg.task, cfg.pooling, d, cfg.vocab_size, &mut rng)?;
        Ok(Self {
            pe: sinusoidal_table(cfg.max_len, half),
            cfg,
            emb,
            u_basis,
            sigma_raw,
            layers,
            head,
            spectral_evals: Cell::new(0),
        })
    }

    pub fn config(&self) -> &TransJectConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn embedding(&self) -> &SemiOrthogonalParam {
        &self.emb
    }

    pub fn u_basis(&self) -> &OrthogonalParam {
        &self.u_basis
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Head {
        &mut self.head
    }

    /// How many times a spectrum has been computed since construction.
    pub fn spectral_evaluations(&self) -> usize {
        self.spectral_evals.get()
    }

    pub fn orthogonal_params(&self) -> Vec<&OrthogonalParam> {
        let mut out = vec![&self.u_basis];
        for l in &self.layers {
            out.extend(l.u.iter().chain(&l.v));
            out.extend([&l.w1, &l.w2]);
        }
        out
    }

    /// `X^(0)`: row i is `concat(emb(token_i), PE_i)`, shape `[B,N,d]`.
    pub fn embed(&self, batch: &TokenBatch) -> Result<Tensor> {
        check_tokens(batch, self.cfg.vocab_size, self.cfg.max_len)?;
        let half = self.cfg.d_model / 2;
        let e = self.emb.matrix()?.gather_rows(&batch.tokens, &[batch.batch, batch.len])?;
        let pe = positional_block(&self.pe, half, batch.batch, batch.len)?;
        Tensor::concat_last(&[&e, &pe])
    }

    /// Standardized spectrum for `x0` (`[B,d]` or `[d]`) and, in the
    /// approximated mode, the reconstruction loss.
    pub fn spectrum(&self, x0: &Tensor, mask: Option<&[f64]>) -> Result<(Tensor, Option<Tensor>)> {
        self.spectral_evals.set(self.spectral_evals.get() + 1);
        match &self.sigma_raw {
            Some(raw) => Ok((standardize(raw.tensor()), None)),
            None => {
                let xm = match mask {
                    Some(m) => {
                        let s = x0.shape();
                        x0.mul(&Tensor::new(m.to_vec(), &[s[0], s[1], 1])?)?
                    }
                    None => x0.clone(),
                };
                let approx = approx_eigen(&gram(&xm)?, &self.u_basis)?;
                Ok((standardize(&approx.sigma_raw), Some(approx.recon_loss)))
            }
        }
    }

    /// One composite sublayer `ORF ∘ MoE ∘ IR`; also returns the gate.
    pub fn sublayer(&self, l: usize, x: &Tensor, sigma: &Tensor, mask: Option<&[f64]>) -> Result<(Tensor, Tensor)> {
        let p = &self.layers[l];
        let big_l = self.cfg.layers;
        let lam = gate(x, p.gate_w.tensor(), mask)?;
        let branches = p
            .u
            .iter()
            .zip(&p.v)
            .map(|(u, v)| expert_branch(x, &u.matrix()?, &v.matrix()?, sigma, p.residual.tensor(), big_l))
            .collect::<Result<Vec<_>>>()?;
        let mixed = moe_combine(&branches, &lam)?;
        let ffn_alpha = p.ffn_residual.as_ref().unwrap_or(&p.residual);
        let out = orf(
            &mixed,
            &p.w1.matrix()?,
            &p.w2.matrix()?,
            p.b1.tensor(),
            p.b2.tensor(),
            ffn_alpha.tensor(),
            big_l,
        )?;
        Ok((out, lam))
    }

    /// Runs every sublayer from given initial representations `[B,N,d]`.
    pub fn encode_embedded(&self, x0: &Tensor, mask: Option<&[f64]>) -> Result<ForwardOutput> {
        let (sigma, recon_loss) = self.spectrum(x0, mask)?;
        let mut trace = vec![x0.clone()];
        let mut gates = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let (next, lam) = self.sublayer(l, trace.last().unwrap(), &sigma, mask)?;
            trace.push(next);
            gates.push(lam);
        }
        Ok(ForwardOutput {
            logits: Tensor::scalar(0.0),
            trace,
            recon_loss,
            gates,
        })
    }

    pub fn forward(&self, batch: &TokenBatch) -> Result<ForwardOutput> {
        let x0 = self.embed(batch)?;
        let mut out = self.encode_embedded(&x0, batch.pool_mask())?;
        out.logits = self.head.forward(out.trace.last().unwrap(), batch)?;
        Ok(out)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![self.emb.raw()];
        if let Some(s) = &self.sigma_raw {
            out.push(s);
        } else {
            out.push(self.u_basis.raw());
        }
        for l in &self.layers {
            out.extend(l.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![self.emb.raw_mut()];
        match &mut self.sigma_raw {
            Some(s) => out.push(s),
            None => out.push(self.u_basis.raw_mut()),
        }
        for l in &mut self.layers {
            out.extend(l.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }
}
