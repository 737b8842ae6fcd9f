//! Pieces shared by both encoder families: tasks, pooling, positional
//! tables, batch inputs and forward outputs.

use serde::{Deserialize, Serialize};

use crate::baseline::{Baseline, BaselineConfig};
use crate::error::{Error, Result};
use crate::ortho::OrthogonalParam;
use crate::param::{xavier, ModelRng, Param};
use crate::tensor::Tensor;
use crate::transject::{TransJect, TransJectConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Classification { classes: usize },
    LanguageModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

/// A right-padded batch of token ids, `[batch, len]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    /// 1 for real positions, 0 for padding.
    pub mask: Vec<f64>,
}

impl TokenBatch {
    pub fn new(tokens: Vec<usize>, batch: usize, len: usize, mask: Vec<f64>) -> Result<Self> {
        if tokens.len() != batch * len || mask.len() != batch * len {
            return Err(Error::shape("token batch", &[batch, len], &[tokens.len(), mask.len()]));
        }
        Ok(Self { tokens, batch, len, mask })
    }

    /// A single unpadded sequence.
    pub fn single(tokens: &[usize]) -> Self {
        Self {
            tokens: tokens.to_vec(),
            batch: 1,
            len: tokens.len(),
            mask: vec![1.0; tokens.len()],
        }
    }

    pub fn is_padded(&self) -> bool {
        self.mask.iter().any(|&m| m == 0.0)
    }

    /// `None` when nothing is padded, so pooling takes the cheap path.
    pub fn pool_mask(&self) -> Option<&[f64]> {
        self.is_padded().then_some(self.mask.as_slice())
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `X^(0) .. X^(L)`, each `[B,N,d]`.
    pub trace: Vec<Tensor>,
    /// `[B,C]` for classification, `[B,N,V]` for language modelling.
    pub logits: Tensor,
    /// Spectral reconstruction loss (TransJect with approximated spectrum).
    pub recon_loss: Option<Tensor>,
    /// Per-layer gate weights `[B,E]` (TransJect only).
    pub gates: Vec<Tensor>,
}

/// Sinusoidal table of `rows × width`: even columns `sin`, odd `cos`.
pub fn sinusoidal_table(rows: usize, width: usize) -> Vec<f64> {
    let mut pe = vec![0.0; rows * width];
    for pos in 0..rows {
        for i in (0..width).step_by(2) {
            let angle = pos as f64 / 10_000f64.powf(i as f64 / width as f64);
            pe[pos * width + i] = angle.sin();
            if i + 1 < width {
                pe[pos * width + i + 1] = angle.cos();
            }
        }
    }
    pe
}

/// Positional rows `0..len` of `table`, repeated for every batch item.
pub(crate) fn positional_block(table: &[f64], width: usize, batch: usize, len: usize) -> Result<Tensor> {
    let rows = &table[..len * width];
    let mut data = Vec::with_capacity(batch * rows.len());
    for _ in 0..batch {
        data.extend_from_slice(rows);
    }
    Tensor::new(data, &[batch, len, width])
}

/// Linear task head on top of the last encoder layer.
#[derive(Debug, Clone)]
pub struct Head {
    pub task: Task,
    pub pooling: Pooling,
    pub w: Param,
    pub b: Param,
}

impl Head {
    pub fn new(task: Task, pooling: Pooling, d: usize, vocab_size: usize, rng: &mut ModelRng) -> Result<Self> {
        let out = match task {
            Task::Classification { classes } => classes,
            Task::LanguageModel => vocab_size,
        };
        Ok(Self {
            task,
            pooling,
            w: Param::new("head.w", xavier(rng, d, out), &[d, out])?,
            b: Param::new("head.b", vec![0.0; out], &[out])?,
        })
    }

    pub fn forward(&self, x: &Tensor, batch: &TokenBatch) -> Result<Tensor> {
        let out = self.b.shape()[0];
        match self.task {
            Task::Classification { .. } => {
                let mask = batch.pool_mask();
                let pooled = match self.pooling {
                    Pooling::Mean => x.mean_pool(mask)?,
                    Pooling::Max => x.max_pool(mask)?,
                };
                pooled.matmul(self.w.tensor())?.add(&self.b.tensor().reshape(&[1, out])?)
            }
            Task::LanguageModel => x
                .matmul(self.w.tensor())?
                .add(&self.b.tensor().reshape(&[1, 1, out])?),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelConfig {
    TransJect(TransJectConfig),
    Baseline(BaselineConfig),
}

impl ModelConfig {
    pub fn task(&self) -> Task {
        match self {
            Self::TransJect(c) => c.task,
            Self::Baseline(c) => c.task,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Self::TransJect(c) => c.vocab_size,
            Self::Baseline(c) => c.vocab_size,
        }
    }

    pub fn max_len(&self) -> usize {
        match self {
            Self::TransJect(c) => c.max_len,
            Self::Baseline(c) => c.max_len,
        }
    }
}

/// Either encoder family behind one interface.
#[derive(Debug, Clone)]
pub enum Model {
    TransJect(TransJect),
    Baseline(Baseline),
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        Ok(match cfg {
            ModelConfig::TransJect(c) => Self::TransJect(TransJect::new(c)?),
            ModelConfig::Baseline(c) => Self::Baseline(Baseline::new(c)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Self::TransJect(m) => ModelConfig::TransJect(m.config().clone()),
            Self::Baseline(m) => ModelConfig::Baseline(m.config().clone()),
        }
    }

    /// Short label used in analysis output.
    pub fn tag(&self) -> String {
        match self {
            Self::TransJect(m) => match m.config().sigma_mode {
                crate::spectral::SigmaMode::Approximated => "transject".into(),
                crate::spectral::SigmaMode::Random => "transject-random".into(),
            },
            Self::Baseline(m) => format!("{:?}", m.config().variant).to_lowercase(),
        }
    }

    pub fn task(&self) -> Task {
        self.config().task()
    }

    /// Weight of the spectral reconstruction term in the training loss.
    pub fn recon_weight(&self) -> f64 {
        match self {
            Self::TransJect(m) => m.config().recon_weight,
            Self::Baseline(_) => 0.0,
        }
    }

    /// `train` enables dropout where the model has any.
    pub fn forward(&self, batch: &TokenBatch, train: bool) -> Result<ForwardOutput> {
        match self {
            Self::TransJect(m) => m.forward(batch),
            Self::Baseline(m) => m.forward_mode(batch, train),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Self::TransJect(m) => m.params(),
            Self::Baseline(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Self::TransJect(m) => m.params_mut(),
            Self::Baseline(m) => m.params_mut(),
        }
    }

    pub fn orthogonal_params(&self) -> Vec<&OrthogonalParam> {
        match self {
            Self::TransJect(m) => m.orthogonal_params(),
            Self::Baseline(m) => m.orthogonal_params(),
        }
    }

    /// Effective residual weights `(layer, branch, α)`; empty for models
    /// without learnable residual scalars.
    pub fn residual_weights(&self) -> Vec<(usize, &'static str, f64)> {
        match self {
            Self::TransJect(m) => m
                .layers()
                .iter()
                .enumerate()
                .flat_map(|(l, p)| [(l + 1, "attention", p.alpha()), (l + 1, "ffn", p.ffn_alpha())])
                .collect(),
            Self::Baseline(m) => m
                .blocks()
                .iter()
                .enumerate()
                .filter_map(|(l, b)| b.rezero.as_ref().map(|(a, f)| (l, a, f)))
                .flat_map(|(l, a, f)| [(l + 1, "attention", a.data()[0]), (l + 1, "ffn", f.data()[0])])
                .collect(),
        }
    }

    pub fn count_parameters(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

pub(crate) fn check_tokens(batch: &TokenBatch, vocab_size: usize, max_len: usize) -> Result<()> {
    if batch.len > max_len {
        return Err(Error::Length { len: batch.len, max_len });
    }
    if let Some(&id) = batch.tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(Error::Vocabulary { id, vocab_size });
    }
    Ok(())
}
