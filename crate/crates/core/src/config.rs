//! Experiment configuration: `[model]`, `[data]`, `[optim]` and `[output]`
//! sections of `key = value` pairs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::Variant;
use crate::error::{Error, Result};
use crate::model::Pooling;
use crate::spectral::SigmaMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    TransJect,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub family: Family,
    pub layers: usize,
    pub d_model: usize,
    pub experts: usize,
    pub sigma_mode: SigmaMode,
    pub tie_orf_residual: bool,
    /// Defaults to max pooling for ListOps, mean otherwise.
    pub pooling: Option<Pooling>,
    pub heads: usize,
    /// Defaults to `4 · d_model`.
    pub d_ff: Option<usize>,
    pub variant: Variant,
    /// Defaults to 0.1, or 0 for the ReZero variant.
    pub dropout: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            family: Family::TransJect,
            layers: 4,
            d_model: 64,
            experts: 2,
            sigma_mode: SigmaMode::Approximated,
            tie_orf_residual: false,
            pooling: None,
            heads: 4,
            d_ff: None,
            variant: Variant::Vanilla,
            dropout: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataTask {
    ListOps,
    Classification,
    Lm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub task: DataTask,
    pub batch_size: usize,
    /// Defaults to `optim.seed`.
    pub seed: Option<u64>,
    pub train_count: usize,
    pub val_count: usize,
    pub max_depth: usize,
    pub max_len: usize,
    pub min_arity: usize,
    pub max_arity: usize,
    pub leaf_prob: f64,
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub val_fraction: f64,
    pub text_path: Option<PathBuf>,
    pub window: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            task: DataTask::ListOps,
            batch_size: 32,
            seed: None,
            train_count: 2000,
            val_count: 500,
            max_depth: 2,
            max_len: 32,
            min_arity: 2,
            max_arity: 4,
            leaf_prob: 0.6,
            train_path: None,
            val_path: None,
            val_fraction: 0.1,
            text_path: None,
            window: 35,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    /// Defaults to 5e-4 for classification tasks and 1e-2 for LM.
    pub lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub patience: usize,
    pub recon_weight: f64,
    pub seed: u64,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            lr: None,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            epochs: 20,
            patience: 4,
            recon_weight: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub run_dir: PathBuf,
    /// Validation samples traced for the analysis bundle.
    pub analysis_samples: usize,
    /// Leading tokens of the first traced sample kept in distance matrices.
    pub distance_tokens: usize,
    /// Per-epoch progress lines on stderr.
    pub progress: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/default"),
            analysis_samples: 64,
            distance_tokens: 8,
            progress: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub optim: OptimSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory. Also returns the raw text for the run copy.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok((cfg, text))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.data.train_path, &mut self.data.val_path, &mut self.data.text_path]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.output.run_dir);
    }

    fn check(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        let d = &self.data;
        if d.batch_size == 0 {
            return fail("data.batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&d.val_fraction) {
            return fail("data.val_fraction must lie in [0, 1)");
        }
        match d.task {
            DataTask::Classification if d.train_path.is_none() => {
                return fail("classification needs data.train_path");
            }
            DataTask::Lm if d.text_path.is_none() => return fail("lm needs data.text_path"),
            _ => {}
        }
        let o = &self.optim;
        if o.lr.is_some_and(|lr| !(lr > 0.0)) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return fail("optim.lr must be positive and betas in [0, 1)");
        }
        if o.epochs == 0 || o.patience == 0 {
            return fail("optim.epochs and optim.patience must be positive");
        }
        Ok(())
    }

    /// Verifies that every referenced input file exists.
    pub fn validate_paths(&self) -> Result<()> {
        for p in [&self.data.train_path, &self.data.val_path, &self.data.text_path]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                return Err(Error::Config(format!("data file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn learning_rate(&self) -> f64 {
        self.optim.lr.unwrap_or(match self.data.task {
            DataTask::Lm => 1e-2,
            _ => 5e-4,
        })
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.optim.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = ExperimentConfig::parse("[model]\nlayers = 3\n[optim]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.model.layers, 3);
        assert_eq!(cfg.optim.epochs, 2);
        assert_eq!(cfg.learning_rate(), 5e-4);
        assert_eq!(cfg.data.task, DataTask::ListOps);
    }

    #[test]
    fn rejects_unknown_keys_and_missing_paths() {
        assert!(ExperimentConfig::parse("[model]\nlayer = 3\n").is_err());
        assert!(ExperimentConfig::parse("[data]\ntask = \"lm\"\n").is_err());
        let lm = ExperimentConfig::parse("[data]\ntask = \"lm\"\ntext_path = \"x.txt\"\n").unwrap();
        assert_eq!(lm.learning_rate(), 1e-2);
        assert!(lm.validate_paths().is_err());
    }
}
