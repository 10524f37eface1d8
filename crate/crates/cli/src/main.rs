use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use transvae_core::data::{generate, GenConfig, Mode};
use transvae_core::harness::{self, Corpus, RunConfig, Split, TrainOptions};

#[derive(Parser)]
#[command(
    name = "transvae",
    version,
    about = "Sequential VAE domain adaptation on synthetic sprite videos"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the two-domain corpus into `train.tsvd` and `test.tsvd`.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = Mode::Image)]
        mode: Mode,
        /// Sequences per (domain, class) cell before the 80/20 split.
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
    },
    /// Train a run; writes config, metrics and checkpoint into `--out`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Per-domain top-1 accuracy of a trained run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Linear probes on frozen latents; prints a CSV report.
    Probe {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump static-swap panels as PPM images.
    Swap {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every layer and loss term.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate {
            out,
            seed,
            mode,
            per_class,
            frames,
        } => {
            let (train, test) = generate(&GenConfig {
                seed,
                per_class,
                frames,
                mode,
            })?;
            println!(
                "generated {} train and {} test sequences in {}",
                train.len(),
                test.len(),
                out.display()
            );
            Corpus { train, test }.save(&out)?;
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
            stop_after,
        } => {
            let mut cfg = match &config {
                Some(path) => {
                    let text = fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    RunConfig::parse(&text).with_context(|| format!("in {}", path.display()))?
                }
                None => RunConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let rows = harness::train(&cfg, &data, &out, &TrainOptions { resume, stop_after })?;
            if let Some(last) = rows.last() {
                println!(
                    "epoch {}: total {:.4}, source train acc {:.3}, target test acc {:.3}",
                    last.epoch, last.losses.total, last.src_train_acc, last.tgt_test_acc
                );
            }
        }
        Command::Eval { run, data, split } => {
            let report = harness::evaluate(&run, &data, split)?;
            println!("source {:.4}\ntarget {:.4}", report.source, report.target);
        }
        Command::Probe { run, data, out } => {
            let csv = harness::probe(&run, &data)?.to_csv();
            print!("{csv}");
            if let Some(path) = out {
                fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Swap {
            run,
            data,
            out,
            pairs,
            seed,
        } => {
            let report = harness::swap(&run, &data, pairs, &out, seed)?;
            println!(
                "wrote {} panels to {}; self-swap exact: {}; flip rate {:.3}",
                report.panels.len(),
                out.display(),
                report.self_swap_exact,
                report.flip_rate
            );
        }
        Command::Gradcheck { seed } => {
            let report = harness::run_battery(seed)?;
            println!("{report}");
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
