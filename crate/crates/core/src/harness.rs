//! Training loop with early stopping, run-directory output, analysis export
//! and inference benchmarks.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::analysis::{self, TraceBundle};
use crate::baseline::{BaselineConfig, Variant};
use crate::checkpoint::{self, DataMeta};
use crate::config::{DataTask, ExperimentConfig, Family};
use crate::data::{self, Batch, Example, ListOpsGrammar, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Pooling, Task, TokenBatch};
use crate::optim::Adam;
use crate::param::ModelRng;
use crate::tensor::{no_grad, Tensor};
use crate::transject::TransJectConfig;

/// Train/validation examples plus what the model needs to know about them.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub task: DataTask,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub vocab: Vocabulary,
    pub classes: Option<usize>,
    pub max_len: usize,
}

impl PreparedData {
    pub fn model_task(&self) -> Task {
        match self.classes {
            Some(classes) => Task::Classification { classes },
            None => Task::LanguageModel,
        }
    }

    pub fn meta(&self) -> DataMeta {
        DataMeta { task: self.task, symbols: self.vocab.symbols().to_vec() }
    }

    /// Share of the most frequent training label.
    pub fn majority_rate(&self) -> Option<f64> {
        let classes = self.classes?;
        let mut counts = vec![0usize; classes];
        for e in &self.train {
            if let data::Target::Class(c) = e.target {
                counts[c] += 1;
            }
        }
        Some(*counts.iter().max()? as f64 / self.train.len() as f64)
    }
}

fn grammar(cfg: &ExperimentConfig) -> ListOpsGrammar {
    let d = &cfg.data;
    ListOpsGrammar {
        max_depth: d.max_depth,
        max_len: d.max_len,
        min_arity: d.min_arity,
        max_arity: d.max_arity,
        leaf_prob: d.leaf_prob,
    }
}

fn split_off_val<T>(mut rows: Vec<T>, fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    rows.shuffle(&mut ModelRng::seed_from_u64(seed));
    let n_val = ((rows.len() as f64) * fraction).round() as usize;
    let val = rows.split_off(rows.len() - n_val.min(rows.len()));
    (rows, val)
}

fn truncate(examples: &mut [Example], max_len: usize) {
    for e in examples {
        e.tokens.truncate(max_len);
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    cfg.validate_paths()?;
    let d = &cfg.data;
    let seed = cfg.data_seed();
    match d.task {
        DataTask::ListOps => {
            let vocab = data::listops_vocabulary();
            let (train_rows, val_rows) = match &d.train_path {
                Some(p) => {
                    let rows: Vec<(u8, String)> = data::read_tsv(p)?
                        .into_iter()
                        .map(|(l, e)| (l as u8, e))
                        .collect();
                    match &d.val_path {
                        Some(v) => (rows, data::read_tsv(v)?.into_iter().map(|(l, e)| (l as u8, e)).collect()),
                        None => split_off_val(rows, d.val_fraction, seed),
                    }
                }
                None => {
                    let g = grammar(cfg);
                    (
                        data::gen_listops(d.train_count, &g, seed)?,
                        data::gen_listops(d.val_count, &g, seed.wrapping_add(1))?,
                    )
                }
            };
            let mut train = data::listops_examples(&train_rows, &vocab);
            let mut val = data::listops_examples(&val_rows, &vocab);
            truncate(&mut train, d.max_len);
            truncate(&mut val, d.max_len);
            Ok(PreparedData { task: d.task, train, val, vocab, classes: Some(10), max_len: d.max_len })
        }
        DataTask::Classification => {
            let rows = data::read_tsv(d.train_path.as_ref().unwrap())?;
            let (train_rows, val_rows) = match &d.val_path {
                Some(v) => (rows, data::read_tsv(v)?),
                None => split_off_val(rows, d.val_fraction, seed),
            };
            let vocab = Vocabulary::from_chars(train_rows.iter().map(|(_, t)| t.as_str()));
            let classes = train_rows.iter().chain(&val_rows).map(|(l, _)| l + 1).max().unwrap_or(1);
            let mut train = data::char_examples(&train_rows, &vocab);
            let mut val = data::char_examples(&val_rows, &vocab);
            truncate(&mut train, d.max_len);
            truncate(&mut val, d.max_len);
            Ok(PreparedData { task: d.task, train, val, vocab, classes: Some(classes), max_len: d.max_len })
        }
        DataTask::Lm => {
            let p = d.text_path.as_ref().unwrap();
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let chars: Vec<char> = text.chars().collect();
            let cut = ((chars.len() as f64) * (1.0 - d.val_fraction)).round() as usize;
            let train_text: String = chars[..cut].iter().collect();
            let vocab = Vocabulary::from_chars([train_text.as_str()]);
            let train = data::build_lm_windows(&vocab.encode_chars(&train_text), d.window)?;
            let val_text: String = chars[cut..].iter().collect();
            let val = data::build_lm_windows(&vocab.encode_chars(&val_text), d.window)?;
            Ok(PreparedData { task: d.task, train, val, vocab, classes: None, max_len: d.window })
        }
    }
}

pub fn model_config(cfg: &ExperimentConfig, data: &PreparedData) -> ModelConfig {
    let m = &cfg.model;
    let pooling = m.pooling.unwrap_or(match data.task {
        DataTask::ListOps => Pooling::Max,
        _ => Pooling::Mean,
    });
    match m.family {
        Family::TransJect => ModelConfig::TransJect(TransJectConfig {
            layers: m.layers,
            d_model: m.d_model,
            experts: m.experts,
            vocab_size: data.vocab.len(),
            max_len: data.max_len,
            sigma_mode: m.sigma_mode,
            recon_weight: cfg.optim.recon_weight,
            task: data.model_task(),
            pooling,
            tie_orf_residual: m.tie_orf_residual,
            seed: cfg.optim.seed,
        }),
        Family::Baseline => ModelConfig::Baseline(BaselineConfig {
            layers: m.layers,
            d_model: m.d_model,
            heads: m.heads,
            d_ff: m.d_ff.unwrap_or(4 * m.d_model),
            variant: m.variant,
            vocab_size: data.vocab.len(),
            max_len: data.max_len,
            task: data.model_task(),
            pooling,
            dropout: m.dropout.unwrap_or(if m.variant == Variant::ReZero { 0.0 } else { 0.1 }),
            seed: cfg.optim.seed,
        }),
    }
}

/// Per-batch loss statistics.
struct BatchLoss {
    task: f64,
    recon: f64,
    correct: usize,
    targets: f64,
}

fn batch_loss(model: &Model, batch: &Batch, train: bool) -> Result<(Tensor, BatchLoss)> {
    let out = model.forward(&batch.input, train)?;
    let (task_loss, correct) = match model.task() {
        Task::Classification { .. } => {
            let c = out.logits.shape()[1];
            let correct = out
                .logits
                .data()
                .chunks(c)
                .zip(&batch.targets)
                .filter(|(row, &t)| argmax(row) == t)
                .count();
            (out.logits.cross_entropy(&batch.targets, None)?, correct)
        }
        Task::LanguageModel => (out.logits.cross_entropy(&batch.targets, Some(&batch.weights))?, 0),
    };
    let recon = out.recon_loss.as_ref().map_or(0.0, Tensor::item);
    let total = match (&out.recon_loss, model.recon_weight()) {
        (Some(r), w) if w > 0.0 => task_loss.add(&r.scale(w))?,
        _ => task_loss.clone(),
    };
    let stats = BatchLoss {
        task: task_loss.item(),
        recon,
        correct,
        targets: batch.weights.iter().sum(),
    };
    Ok((total, stats))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub recon_loss: f64,
    pub accuracy: Option<f64>,
    pub perplexity: Option<f64>,
}

fn aggregate(epoch: usize, split: &'static str, task: Task, parts: &[BatchLoss]) -> EpochRecord {
    let n: f64 = parts.iter().map(|p| p.targets).sum();
    let loss = parts.iter().map(|p| p.task * p.targets).sum::<f64>() / n;
    let recon = parts.iter().map(|p| p.recon).sum::<f64>() / parts.len() as f64;
    let (accuracy, perplexity) = match task {
        Task::Classification { .. } => (Some(parts.iter().map(|p| p.correct).sum::<usize>() as f64 / n), None),
        Task::LanguageModel => (None, Some(loss.exp())),
    };
    EpochRecord { epoch, split, loss, recon_loss: recon, accuracy, perplexity }
}

pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut s = String::from("epoch,split,loss,recon_loss,accuracy,perplexity\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch,
            r.split,
            r.loss,
            r.recon_loss,
            opt(r.accuracy),
            opt(r.perplexity)
        );
    }
    s
}

/// Forward-only evaluation over batches.
pub fn evaluate(model: &Model, batches: &[Batch], epoch: usize, split: &'static str) -> Result<EpochRecord> {
    let parts = no_grad(|| batches.iter().map(|b| batch_loss(model, b, false).map(|(_, s)| s)).collect::<Result<Vec<_>>>())?;
    Ok(aggregate(epoch, split, model.task(), &parts))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The best (lowest validation loss) parameters.
    pub model: Model,
    pub data: PreparedData,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub bundle: TraceBundle,
    pub run_dir: PathBuf,
}

impl TrainOutcome {
    pub fn best_train_accuracy(&self) -> Option<f64> {
        self.history
            .iter()
            .find(|r| r.epoch == self.best_epoch && r.split == "train")
            .and_then(|r| r.accuracy)
    }
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

/// Full training run. Writes `config.toml`, `metrics.csv`,
/// `checkpoint.bin` and `analysis/*.csv` into `output.run_dir`.
pub fn train(cfg: &ExperimentConfig, config_text: &str) -> Result<TrainOutcome> {
    let run_dir = cfg.output.run_dir.clone();
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    write_file(&run_dir.join("config.toml"), config_text)?;

    let data = prepare_data(cfg)?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Data("training and validation splits must both be non-empty".into()));
    }
    let mut model = Model::new(model_config(cfg, &data))?;
    let mut opt = Adam::new(cfg.learning_rate(), cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps);
    let mut rng = ModelRng::seed_from_u64(cfg.optim.seed.wrapping_add(17));
    let val_batches = data::batchify(&data.val, cfg.data.batch_size, PAD)?;
    let ckpt = run_dir.join("checkpoint.bin");
    let metrics_path = run_dir.join("metrics.csv");

    let mut history = Vec::new();
    let (mut best_loss, mut best_epoch, mut bad_epochs) = (f64::INFINITY, 0, 0);
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.optim.epochs {
        order.shuffle(&mut rng);
        let shuffled: Vec<Example> = order.iter().map(|&i| data.train[i].clone()).collect();
        let mut parts = Vec::new();
        for batch in data::batchify(&shuffled, cfg.data.batch_size, PAD)? {
            let (total, stats) = batch_loss(&model, &batch, true)?;
            if !total.item().is_finite() {
                return Err(Error::Divergence { epoch, loss: total.item() });
            }
            total.backward()?;
            opt.step(&mut model.params_mut())?;
            parts.push(stats);
        }
        let train_rec = aggregate(epoch, "train", model.task(), &parts);
        let val_rec = evaluate(&model, &val_batches, epoch, "val")?;
        if !val_rec.loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: val_rec.loss });
        }
        if cfg.output.progress {
            eprintln!(
                "epoch {epoch:>3}  train loss {:.4} acc {:?}  val loss {:.4} acc {:?}",
                train_rec.loss, train_rec.accuracy, val_rec.loss, val_rec.accuracy
            );
        }
        let improved = val_rec.loss < best_loss;
        history.push(train_rec);
        history.push(val_rec.clone());
        write_file(&metrics_path, &metrics_csv(&history))?;
        if improved {
            best_loss = val_rec.loss;
            best_epoch = epoch;
            bad_epochs = 0;
            checkpoint::save(&ckpt, &model, Some(data.meta()))?;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.optim.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best, _) = checkpoint::load(&ckpt)?;
    model = best;
    let bundle = trace_examples(&model, &data.val[..data.val.len().min(cfg.output.analysis_samples)], cfg.data.batch_size)?;
    let analysis_dir = run_dir.join("analysis");
    analysis::write_bundle(&bundle, &analysis_dir, cfg.output.distance_tokens)?;
    write_file(&analysis_dir.join("parameters.csv"), &parameters_csv(&model))?;
    Ok(TrainOutcome { model, data, history, best_epoch, stopped_early, bundle, run_dir })
}

/// Forward passes without recording, collected into a trace bundle.
pub fn trace_examples(model: &Model, examples: &[Example], batch_size: usize) -> Result<TraceBundle> {
    let mut bundle = TraceBundle::new(model);
    for batch in data::batchify(examples, batch_size, PAD)? {
        let out = no_grad(|| model.forward(&batch.input, false))?;
        bundle.push(&batch.input, &out);
    }
    Ok(bundle)
}

/// Loads a checkpoint, tokenizes `data_path` with the stored vocabulary and
/// writes the analysis bundle into `out`.
pub fn analyze(checkpoint_path: &Path, data_path: &Path, out: &Path, samples: usize) -> Result<TraceBundle> {
    let (model, header) = checkpoint::load(checkpoint_path)?;
    let meta = header
        .data
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no data metadata".into()))?;
    let vocab = Vocabulary::from_symbols(meta.symbols.iter().cloned());
    let max_len = model.config().max_len();
    let mut examples = match meta.task {
        DataTask::ListOps => {
            let rows: Vec<(u8, String)> = data::read_tsv(data_path)?.into_iter().map(|(l, e)| (l as u8, e)).collect();
            data::listops_examples(&rows, &vocab)
        }
        DataTask::Classification => data::char_examples(&data::read_tsv(data_path)?, &vocab),
        DataTask::Lm => {
            let text = std::fs::read_to_string(data_path).map_err(|e| Error::io(data_path, e))?;
            data::build_lm_windows(&vocab.encode_chars(&text), max_len)?
        }
    };
    truncate(&mut examples, max_len);
    examples.truncate(samples);
    let bundle = trace_examples(&model, &examples, 32)?;
    analysis::write_bundle(&bundle, out, 8)?;
    write_file(&out.join("parameters.csv"), &parameters_csv(&model))?;
    Ok(bundle)
}

/// Total trainable scalars and a breakdown by the first component of each
/// parameter name.
pub fn count_parameters(model: &Model) -> (usize, Vec<(String, usize)>) {
    let mut groups: Vec<(String, usize)> = Vec::new();
    for p in model.params() {
        let module = p.name().split('.').next().unwrap_or("").to_string();
        match groups.iter_mut().find(|(m, _)| *m == module) {
            Some((_, n)) => *n += p.numel(),
            None => groups.push((module, p.numel())),
        }
    }
    (groups.iter().map(|(_, n)| n).sum(), groups)
}

pub fn parameters_csv(model: &Model) -> String {
    let (total, groups) = count_parameters(model);
    let mut s = String::from("module,parameters\n");
    for (m, n) in groups {
        let _ = writeln!(s, "{m},{n}");
    }
    let _ = writeln!(s, "total,{total}");
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub model: String,
    pub length: usize,
    pub median_seconds: f64,
    /// Vanilla median over this model's median at the same length.
    pub speedup: f64,
}

pub const BENCH_WARMUPS: usize = 3;

/// Median wall time of one forward pass (`repeats` timed runs after
/// [`BENCH_WARMUPS`] untimed ones).
pub fn time_forward(model: &Model, batch: &TokenBatch, repeats: usize) -> Result<f64> {
    let mut times = Vec::with_capacity(repeats);
    no_grad(|| -> Result<()> {
        for _ in 0..BENCH_WARMUPS {
            model.forward(batch, false)?;
        }
        for _ in 0..repeats {
            let t = Instant::now();
            model.forward(batch, false)?;
            times.push(t.elapsed().as_secs_f64());
        }
        Ok(())
    })?;
    times.sort_by(f64::total_cmp);
    let n = times.len();
    Ok(if n % 2 == 1 { times[n / 2] } else { 0.5 * (times[n / 2 - 1] + times[n / 2]) })
}

/// Benchmarks the configured model and a vanilla baseline of the same
/// depth and width on random single-sequence inputs.
pub fn bench(cfg: &ExperimentConfig, lengths: &[usize], repeats: usize) -> Result<Vec<BenchRow>> {
    if repeats < 20 {
        return Err(Error::Precondition(format!("need at least 20 repeats, got {repeats}")));
    }
    let max_len = lengths.iter().copied().max().ok_or_else(|| Error::Config("no lengths given".into()))?;
    let vocab = 32;
    let fake = PreparedData {
        task: DataTask::ListOps,
        train: Vec::new(),
        val: Vec::new(),
        vocab: Vocabulary::from_symbols((0..vocab - 2).map(|i| format!("t{i}"))),
        classes: Some(10),
        max_len,
    };
    let subject = Model::new(model_config(cfg, &fake))?;
    let mut vanilla_cfg = cfg.clone();
    vanilla_cfg.model.family = Family::Baseline;
    vanilla_cfg.model.variant = Variant::Vanilla;
    let vanilla = Model::new(model_config(&vanilla_cfg, &fake))?;

    let mut rng = ModelRng::seed_from_u64(cfg.optim.seed);
    let mut rows = Vec::new();
    for &n in lengths {
        let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(2..vocab)).collect();
        let batch = TokenBatch::single(&tokens);
        let base = time_forward(&vanilla, &batch, repeats)?;
        let models: Vec<&Model> = if cfg.model.family == Family::Baseline && cfg.model.variant == Variant::Vanilla {
            vec![&vanilla]
        } else {
            vec![&subject, &vanilla]
        };
        for m in models {
            let t = if std::ptr::eq(m, &vanilla) { base } else { time_forward(m, &batch, repeats)? };
            rows.push(BenchRow { model: m.tag(), length: n, median_seconds: t, speedup: base / t });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("model,length,median_seconds,speedup_vs_vanilla\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.model, r.length, r.median_seconds, r.speedup);
    }
    s
}
