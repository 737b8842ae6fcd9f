//! Softmax-attention Transformer encoder in three flavours: post-norm
//! vanilla, ReZero, and vanilla with orthogonally parametrised projections.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_tokens, positional_block, sinusoidal_table, ForwardOutput, Head, Pooling, Task, TokenBatch};
use crate::ortho::OrthogonalParam;
use crate::param::{normal, xavier, ModelRng, Param};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vanilla,
    ReZero,
    Orthogonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub variant: Variant,
    pub vocab_size: usize,
    pub max_len: usize,
    pub task: Task,
    #[serde(default)]
    pub pooling: Pooling,
    pub dropout: f64,
    pub seed: u64,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return fail("layers, d_model, heads and d_ff must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return fail(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return fail("vocab_size and max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// A square projection, plain or orthogonally parametrised.
#[derive(Debug, Clone)]
pub enum Projection {
    Plain(Param),
    Orthogonal(OrthogonalParam),
}

impl Projection {
    fn new(name: String, d: usize, orthogonal: bool, rng: &mut ModelRng) -> Result<Self> {
        Ok(if orthogonal {
            Self::Orthogonal(OrthogonalParam::random(name, d, 1.0 / (d as f64).sqrt(), rng)?)
        } else {
            Self::Plain(Param::new(name, xavier(rng, d, d), &[d, d])?)
        })
    }

    pub fn matrix(&self) -> Result<Tensor> {
        match self {
            Self::Plain(p) => Ok(p.tensor().clone()),
            Self::Orthogonal(o) => o.matrix(),
        }
    }

    pub fn param(&self) -> &Param {
        match self {
            Self::Plain(p) => p,
            Self::Orthogonal(o) => o.raw(),
        }
    }

    fn param_mut(&mut self) -> &mut Param {
        match self {
            Self::Plain(p) => p,
            Self::Orthogonal(o) => o.raw_mut(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub wq: Projection,
    pub wk: Projection,
    pub wv: Projection,
    pub wo: Projection,
    pub ff1: Param,
    pub ff1_b: Param,
    pub ff2: Param,
    pub ff2_b: Param,
    /// ReZero weights for the attention and feed-forward branches.
    pub rezero: Option<(Param, Param)>,
}

impl Block {
    fn new(l: usize, cfg: &BaselineConfig, rng: &mut ModelRng) -> Result<Self> {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let ortho = cfg.variant == Variant::Orthogonal;
        let proj = |n: &str, rng: &mut ModelRng| Projection::new(format!("block{l}.{n}"), d, ortho, rng);
        Ok(Self {
            wq: proj("wq", rng)?,
            wk: proj("wk", rng)?,
            wv: proj("wv", rng)?,
            wo: proj("wo", rng)?,
            ff1: Param::new(format!("block{l}.ff1"), xavier(rng, d, f), &[d, f])?,
            ff1_b: Param::new(format!("block{l}.ff1_b"), vec![0.0; f], &[f])?,
            ff2: Param::new(format!("block{l}.ff2"), xavier(rng, f, d), &[f, d])?,
            ff2_b: Param::new(format!("block{l}.ff2_b"), vec![0.0; d], &[d])?,
            rezero: if cfg.variant == Variant::ReZero {
                Some((
                    Param::new(format!("block{l}.rezero_attn"), vec![0.0], &[1])?,
                    Param::new(format!("block{l}.rezero_ff"), vec![0.0], &[1])?,
                ))
            } else {
                None
            },
        })
    }

    fn params(&self) -> Vec<&Param> {
        let mut out = vec![
            self.wq.param(),
            self.wk.param(),
            self.wv.param(),
            self.wo.param(),
            &self.ff1,
            &self.ff1_b,
            &self.ff2,
            &self.ff2_b,
        ];
        if let Some((a, b)) = &self.rezero {
            out.extend([a, b]);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![
            self.wq.param_mut(),
            self.wk.param_mut(),
            self.wv.param_mut(),
            self.wo.param_mut(),
            &mut self.ff1,
            &mut self.ff1_b,
            &mut self.ff2,
            &mut self.ff2_b,
        ];
        if let Some((a, b)) = &mut self.rezero {
            out.extend([a, b]);
        }
        out
    }
}

/// Multi-head `softmax(QKᵀ/√d_h)·V` over `[B,N,d]`, output-projected.
/// Padded key positions receive no attention.
pub fn dot_product_attention(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    heads: usize,
    mask: Option<&[f64]>,
) -> Result<Tensor> {
    let s = x.shape();
    let (b, n, d) = (s[0], s[1], s[2]);
    let q = x.matmul(wq)?.split_heads(heads)?;
    let k = x.matmul(wk)?.split_heads(heads)?;
    let v = x.matmul(wv)?.split_heads(heads)?;
    let mut scores = q.matmul(&k.transpose()?)?.scale(1.0 / ((d / heads) as f64).sqrt());
    if let Some(m) = mask {
        let mut bias = Vec::with_capacity(b * heads * n);
        for bi in 0..b {
            let row: Vec<f64> = m[bi * n..(bi + 1) * n]
                .iter()
                .map(|&v| if v > 0.0 { 0.0 } else { -1e9 })
                .collect();
            for _ in 0..heads {
                bias.extend_from_slice(&row);
            }
        }
        scores = scores.add(&Tensor::new(bias, &[b * heads, 1, n])?)?;
    }
    let att = scores.softmax(2)?;
    att.matmul(&v)?.merge_heads(heads)?.matmul(wo)
}

#[derive(Debug, Clone)]
pub struct Baseline {
    cfg: BaselineConfig,
    emb: Param,
    pe: Vec<f64>,
    blocks: Vec<Block>,
    head: Head,
    dropout_rng: RefCell<ModelRng>,
}

impl Baseline {
    pub fn new(cfg: BaselineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ModelRng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let emb = Param::new("embedding", normal(&mut rng, cfg.vocab_size * d, 1.0), &[cfg.vocab_size, d])?;
        let blocks = (0..cfg.layers)
            .map(|l| Block::new(l, &cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Head::new(cfg.task, cfg.pooling, d, cfg.vocab_size, &mut rng)?;
        Ok(Self {
            pe: sinusoidal_table(cfg.max_len, d),
            dropout_rng: RefCell::new(ModelRng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15)),
            cfg,
            emb,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn orthogonal_params(&self) -> Vec<&OrthogonalParam> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for p in [&b.wq, &b.wk, &b.wv, &b.wo] {
                if let Projection::Orthogonal(o) = p {
                    out.push(o);
                }
            }
        }
        out
    }

    /// `X^(0)` = token embedding + sinusoidal position, `[B,N,d]`.
    pub fn embed(&self, batch: &TokenBatch) -> Result<Tensor> {
        check_tokens(batch, self.cfg.vocab_size, self.cfg.max_len)?;
        let e = self.emb.tensor().gather_rows(&batch.tokens, &[batch.batch, batch.len])?;
        e.add(&positional_block(&self.pe, self.cfg.d_model, batch.batch, batch.len)?)
    }

    fn dropout(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let p = self.cfg.dropout;
        if !train || p == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mut rng = self.dropout_rng.borrow_mut();
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        x.mul(&Tensor::new(mask, x.shape())?)
    }

    pub fn block(&self, l: usize, x: &Tensor, mask: Option<&[f64]>, train: bool) -> Result<Tensor> {
        let b = &self.blocks[l];
        let (d, f) = (self.cfg.d_model, self.cfg.d_ff);
        let attn = |x: &Tensor| {
            dot_product_attention(
                x,
                &b.wq.matrix()?,
                &b.wk.matrix()?,
                &b.wv.matrix()?,
                &b.wo.matrix()?,
                self.cfg.heads,
                mask,
            )
        };
        let ffn = |x: &Tensor| -> Result<Tensor> {
            x.matmul(b.ff1.tensor())?
                .add(&b.ff1_b.tensor().reshape(&[1, 1, f])?)?
                .relu()
                .matmul(b.ff2.tensor())?
                .add(&b.ff2_b.tensor().reshape(&[1, 1, d])?)
        };
        match &b.rezero {
            Some((ra, rf)) => {
                let h = x.add(&self.dropout(&attn(x)?, train)?.mul(&ra.tensor().reshape(&[1, 1, 1])?)?)?;
                h.add(&self.dropout(&ffn(&h)?, train)?.mul(&rf.tensor().reshape(&[1, 1, 1])?)?)
            }
            None => {
                let h = x.add(&self.dropout(&attn(x)?, train)?)?.layer_norm_last(LN_EPS);
                Ok(h.add(&self.dropout(&ffn(&h)?, train)?)?.layer_norm_last(LN_EPS))
            }
        }
    }

    /// Forward pass; `train` switches dropout on.
    pub fn forward_mode(&self, batch: &TokenBatch, train: bool) -> Result<ForwardOutput> {
        let x0 = self.embed(batch)?;
        let mask = batch.pool_mask();
        let mut trace = vec![x0];
        for l in 0..self.blocks.len() {
            let next = self.block(l, trace.last().unwrap(), mask, train)?;
            trace.push(next);
        }
        let logits = self.head.forward(trace.last().unwrap(), batch)?;
        Ok(ForwardOutput {
            trace,
            logits,
            recon_loss: None,
            gates: Vec::new(),
        })
    }

    pub fn forward(&self, batch: &TokenBatch) -> Result<ForwardOutput> {
        self.forward_mode(batch, false)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.emb];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.emb];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }
}
