use std::path::Path;
use std::process::Command;

use transject::checkpoint;
use transject::config::{ExperimentConfig, Family};
use transject::data::{self, PAD};
use transject::harness::{self, count_parameters};
use transject::tensor::no_grad;
use transject::Model;

fn tiny(run_dir: &Path) -> (ExperimentConfig, String) {
    let text = format!(
        "[model]\nlayers = 3\nd_model = 8\nexperts = 2\nheads = 2\n\
         [data]\ntrain_count = 96\nval_count = 32\nbatch_size = 16\nmax_len = 24\n\
         [optim]\nepochs = 2\nlr = 0.003\n\
         [output]\nprogress = false\nanalysis_samples = 8\ndistance_tokens = 4\n"
    );
    let mut cfg = ExperimentConfig::parse(&text).unwrap();
    cfg.output.run_dir = run_dir.to_path_buf();
    (cfg, text)
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn run_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, text) = tiny(dir.path());
    let out = harness::train(&cfg, &text).unwrap();
    assert_eq!(read(dir.path().join("config.toml")), text);
    let metrics = read(dir.path().join("metrics.csv"));
    assert!(metrics.starts_with("epoch,split,loss,recon_loss,accuracy,perplexity\n"));
    assert_eq!(metrics.lines().count(), 1 + out.history.len());
    assert!(dir.path().join("checkpoint.bin").is_file());
    let analysis = dir.path().join("analysis");
    let trace = read(analysis.join("metrics.csv"));
    assert!(trace.starts_with("model,layer,metric,statistic,value\n"));
    assert!(trace.contains("activation_factor") && trace.contains("entropy"));
    assert!(read(analysis.join("weights.csv")).contains("gate_expert1"));
    for l in 0..=3 {
        let m = read(analysis.join(format!("distance_cosine_layer{l}.csv")));
        assert!(m.starts_with("token,0,1,2,3\n"), "{m}");
        assert!(analysis.join(format!("distance_euclidean_layer{l}.csv")).is_file());
    }
    assert!(read(analysis.join("parameters.csv")).contains("total,"));
}

#[test]
fn identical_seeds_give_identical_csvs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let (cfg, text) = tiny(d.path());
        harness::train(&cfg, &text).unwrap();
    }
    for f in ["metrics.csv", "analysis/metrics.csv", "analysis/weights.csv"] {
        assert_eq!(read(a.path().join(f)), read(b.path().join(f)), "{f}");
    }
    assert_eq!(std::fs::read(a.path().join("checkpoint.bin")).unwrap(), std::fs::read(b.path().join("checkpoint.bin")).unwrap());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    for family in [Family::TransJect, Family::Baseline] {
        let (mut cfg, _) = tiny(dir.path());
        cfg.model.family = family;
        let prepared = harness::prepare_data(&cfg).unwrap();
        let model = Model::new(harness::model_config(&cfg, &prepared)).unwrap();
        let path = dir.path().join(format!("{family:?}.bin"));
        checkpoint::save(&path, &model, Some(prepared.meta())).unwrap();
        let (loaded, header) = checkpoint::load(&path).unwrap();
        assert_eq!(header.total_scalars(), count_parameters(&model).0);
        let batch = &data::batchify(&prepared.val, 8, PAD).unwrap()[0];
        let (x, y) = no_grad(|| (model.forward(&batch.input, false).unwrap(), loaded.forward(&batch.input, false).unwrap()));
        let bits = |t: &transject::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.logits), bits(&y.logits));
    }
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = tiny(dir.path());
    let prepared = harness::prepare_data(&cfg).unwrap();
    let model = Model::new(harness::model_config(&cfg, &prepared)).unwrap();
    let path = dir.path().join("c.bin");
    checkpoint::save(&path, &model, None).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(checkpoint::load(&path).is_err());
}

#[test]
fn patience_stops_a_stalled_run() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, text) = tiny(dir.path());
    cfg.optim.epochs = 10;
    cfg.optim.patience = 2;
    cfg.optim.lr = Some(1e-300);
    let out = harness::train(&cfg, &text).unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.best_epoch, 1);
    assert_eq!(out.history.last().unwrap().epoch, 3);
}

#[test]
fn recon_weight_changes_the_trajectory() {
    let traj = |beta: f64| {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, text) = tiny(dir.path());
        cfg.optim.recon_weight = beta;
        cfg.optim.epochs = 3;
        cfg.optim.patience = 3;
        let out = harness::train(&cfg, &text).unwrap();
        out.history.iter().filter(|r| r.split == "val").map(|r| r.recon_loss).collect::<Vec<_>>()
    };
    let (off, on) = (traj(0.0), traj(0.1));
    assert_ne!(off, on);
}

#[test]
fn parameter_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, _) = tiny(dir.path());
    let prepared = harness::prepare_data(&cfg).unwrap();
    let count = |cfg: &ExperimentConfig| count_parameters(&Model::new(harness::model_config(cfg, &prepared)).unwrap());
    let (two, groups) = count(&cfg);
    assert_eq!(groups.iter().map(|(_, n)| n).sum::<usize>(), two);
    assert_eq!(groups[0].0, "embedding");
    cfg.model.experts = 1;
    let (one, _) = count(&cfg);
    assert!(two > one);
    // one expert pair of d×d orthogonal raws plus a gate column per layer
    assert_eq!(two - one, 3 * (2 * 8 * 8 + 8));
}

#[test]
fn text_classification_and_lm_tasks_train() {
    let data_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, text) = tiny(dir.path());
    cfg.data.task = transject::config::DataTask::Classification;
    cfg.data.train_path = Some(data_dir.join("sample.tsv"));
    cfg.data.max_len = 64;
    let out = harness::train(&cfg, &text).unwrap();
    assert_eq!(out.data.classes, Some(2));
    assert!(out.history.iter().all(|r| r.accuracy.is_some()));

    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, text) = tiny(dir.path());
    cfg.data.task = transject::config::DataTask::Lm;
    cfg.data.text_path = Some(data_dir.join("sample.txt"));
    cfg.data.window = 16;
    let out = harness::train(&cfg, &text).unwrap();
    let ppl = out.history[0].perplexity.unwrap();
    assert!(ppl.is_finite() && ppl > 1.0);
}

#[test]
fn analyze_reuses_checkpoint_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, text) = tiny(dir.path());
    harness::train(&cfg, &text).unwrap();
    let tsv = dir.path().join("probe.tsv");
    let rows: Vec<(usize, String)> = data::gen_listops(12, &data::ListOpsGrammar::default(), 99)
        .unwrap()
        .into_iter()
        .map(|(l, e)| (l as usize, e))
        .collect();
    data::write_tsv(&tsv, &rows).unwrap();
    let out = dir.path().join("probe");
    let bundle = harness::analyze(&dir.path().join("checkpoint.bin"), &tsv, &out, 5).unwrap();
    assert_eq!(bundle.samples.len(), 5);
    assert!(read(out.join("metrics.csv")).lines().count() > 10);
}

#[test]
fn bench_reports_speedup_against_vanilla() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = tiny(dir.path());
    let rows = harness::bench(&cfg, &[8, 16], 20).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.median_seconds > 0.0 && r.speedup > 0.0));
    let vanilla: Vec<_> = rows.iter().filter(|r| r.model == "vanilla").collect();
    assert!(vanilla.iter().all(|r| r.speedup == 1.0));
    assert!(harness::bench(&cfg, &[8], 5).is_err());
}

#[test]
fn cli_generates_listops_and_trains() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_transject");
    let tsv = dir.path().join("l.tsv");
    let st = Command::new(bin)
        .args(["gen-listops", "--count", "40", "--seed", "5", "--out"])
        .arg(&tsv)
        .status()
        .unwrap();
    assert!(st.success());
    let rows = data::read_tsv(&tsv).unwrap();
    assert_eq!(rows.len(), 40);
    for (label, expr) in &rows {
        assert_eq!(data::evaluate_listops(expr).unwrap() as usize, *label);
    }

    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "[model]\nlayers = 3\nd_model = 8\n[data]\ntrain_path = \"l.tsv\"\nval_fraction = 0.25\nmax_len = 64\n\
         [optim]\nepochs = 1\n[output]\nrun_dir = \"run\"\nprogress = false\nanalysis_samples = 4\n",
    )
    .unwrap();
    let out = Command::new(bin).args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("run/checkpoint.bin").is_file());

    let bad = Command::new(bin).args(["train", "--config", "/nonexistent.toml"]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("error:"));
}
