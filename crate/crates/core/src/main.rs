use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use transject::config::ExperimentConfig;
use transject::data::{self, ListOpsGrammar};
use transject::harness;
use transject::Result;

#[derive(Parser)]
#[command(name = "transject", version, about = "Orthogonal-attention encoders: training, analysis and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Trace a checkpoint over a dataset and write analysis CSVs.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Examples to trace.
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Median forward latency against a vanilla transformer.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a labelled ListOps TSV.
    GenListops {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = ListOpsGrammar::default().max_depth)]
        max_depth: usize,
        #[arg(long, default_value_t = ListOpsGrammar::default().max_len)]
        max_len: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let (cfg, text) = ExperimentConfig::load(&config)?;
            let out = harness::train(&cfg, &text)?;
            let (total, _) = harness::count_parameters(&out.model);
            println!(
                "best epoch {} of {}{}; {} parameters; run written to {}",
                out.best_epoch,
                out.history.last().map_or(0, |r| r.epoch),
                if out.stopped_early { " (early stop)" } else { "" },
                total,
                out.run_dir.display()
            );
            if let Some(v) = out.history.iter().find(|r| r.epoch == out.best_epoch && r.split == "val") {
                match (v.accuracy, v.perplexity) {
                    (Some(a), _) => println!("validation loss {:.4}, accuracy {:.4}", v.loss, a),
                    (_, Some(p)) => println!("validation loss {:.4}, perplexity {:.3}", v.loss, p),
                    _ => {}
                }
            }
        }
        Command::Analyze { checkpoint, data, out, samples } => {
            let bundle = harness::analyze(&checkpoint, &data, &out, samples)?;
            println!("traced {} samples; analysis written to {}", bundle.samples.len(), out.display());
        }
        Command::Bench { config, lengths, repeats, out } => {
            let (cfg, _) = ExperimentConfig::load(&config)?;
            let rows = harness::bench(&cfg, &lengths, repeats)?;
            println!("{:<20} {:>7} {:>14} {:>8}", "model", "length", "median_ms", "speedup");
            for r in &rows {
                println!("{:<20} {:>7} {:>14.3} {:>8.2}", r.model, r.length, r.median_seconds * 1e3, r.speedup);
            }
            if let Some(p) = out {
                std::fs::write(&p, harness::bench_csv(&rows)).map_err(|e| transject::Error::io(&p, e))?;
            }
        }
        Command::GenListops { count, seed, out, max_depth, max_len } => {
            let grammar = ListOpsGrammar { max_depth, max_len, ..ListOpsGrammar::default() };
            let rows: Vec<(usize, String)> = data::gen_listops(count, &grammar, seed)?
                .into_iter()
                .map(|(l, e)| (l as usize, e))
                .collect();
            data::write_tsv(&out, &rows)?;
            println!("wrote {} examples to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
