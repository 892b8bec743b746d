//! Command-line front end: INBEN generation, training, evaluation,
//! interpretation and result tables, driven by flat `key = value` configs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod manifest;

use config::{parse_seeds, DatasetRef, InbenGenConfig, TrainRunConfig};
use error::CliError;
use iffnn::training::EpochRecord;
use manifest::{read_run_manifest, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "iffnn", version, about = "Interpretable feed-forward network experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an INBEN dataset.
    InbenGen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides both spec_seed and data_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; `--config` may also be a training manifest to replay.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Seed sweep such as `0-4` or `0,1,2`; run N goes to OUT/seed-N.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Test-split metrics of a checkpoint, as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the dataset in the manifest beside the checkpoint.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Importance images and report records for test samples.
    Interpret {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        /// Comma-separated test sample indices.
        #[arg(long)]
        samples: String,
        /// Comma-separated classes; all when absent.
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate training manifests into a results table.
    Report {
        /// Manifest files, run directories or glob patterns.
        #[arg(required = true)]
        manifests: Vec<String>,
        /// Also write the rows as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn parse_list(text: &str, what: &str) -> Result<Vec<usize>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::config(format!("`{text}` is not a list of {what}")))
        })
        .collect()
}

fn progress(quiet: bool) -> impl FnMut(&EpochRecord) {
    move |e: &EpochRecord| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  loss {:.5}  valid {:.2}%  test {:.2}%",
                e.epoch,
                e.train_loss,
                e.valid_accuracy * 100.0,
                e.test_accuracy * 100.0
            );
        }
    }
}

fn summary(m: &RunManifest) -> String {
    let mut s = format!(
        "{} seed {}: epoch {} selected, valid {:.2}%, test {:.2}%",
        m.model,
        m.seeds.run,
        m.selected_epoch,
        m.valid_accuracy * 100.0,
        m.test_accuracy * 100.0
    );
    if let Some(a) = m.accuracy_at_n {
        s += &format!(", Accuracy@N {:.2}% over {}", a.mean * 100.0, a.population);
    }
    s
}

fn dataset_for(checkpoint: &Path, dataset: Option<&str>) -> Result<data::PreparedData, CliError> {
    match dataset {
        Some(d) => {
            let r = DatasetRef::parse(d, (0, 1), None)?;
            data::prepare(&r, None, 0)
        }
        None => commands::prepare_for(&commands::dataset_of_checkpoint(checkpoint)?),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::InbenGen { config, seed, out } => {
            let text = match &config {
                Some(p) => read_text(p)?,
                None => String::new(),
            };
            let mut cfg = InbenGenConfig::parse(&text)?;
            if let Some(s) = seed {
                cfg.params.seed = s;
                cfg.data_seed = s;
            }
            let m = commands::inben_gen(&cfg, &out)?;
            let data = iffnn::inben::read_dataset(&out.join(commands::DATASET_FILE))?;
            print!("{}", commands::spec_summary(&data.spec));
            println!(
                "wrote {} / {} / {} samples to {} (sha256 {})",
                m.sizes[0],
                m.sizes[1],
                m.sizes[2],
                out.join(commands::DATASET_FILE).display(),
                m.dataset.sha256
            );
        }
        Command::Train {
            config,
            seed,
            seeds,
            dataset,
            out,
            quiet,
        } => {
            let text = read_text(&config)?;
            if text.trim_start().starts_with('{') {
                if seed.is_some() || seeds.is_some() || dataset.is_some() {
                    return Err(CliError::config("a replayed manifest takes no --seed, --seeds or --dataset"));
                }
                let recorded = read_run_manifest(&config)?;
                let m = commands::replay(&recorded, &out, progress(quiet))?;
                println!("{}", summary(&m));
                println!("reproduced checkpoint {}", m.checkpoint.sha256);
                return Ok(());
            }
            let mut cfg = TrainRunConfig::parse(&text, config.parent())?;
            if let Some(d) = dataset {
                let pair = match cfg.dataset {
                    DatasetRef::MnistPair(_, a, b) => (a, b),
                    _ => (0, 1),
                };
                cfg.dataset = DatasetRef::parse(&d, pair, None)?;
                // re-validate key combinations against the new dataset
                cfg = TrainRunConfig::parse(&cfg.canonical_text(), None)?;
            }
            let data = commands::prepare_for(&cfg)?;
            match seeds {
                None => {
                    let cfg = match seed {
                        Some(s) => cfg.with_seed(s),
                        None => cfg,
                    };
                    let m = commands::train_run(&cfg, &data, &out, progress(quiet))?;
                    println!("{}", summary(&m));
                }
                Some(list) => {
                    let seeds = parse_seeds(&list)?;
                    let mut runs = Vec::new();
                    for s in seeds {
                        let dir = out.join(format!("seed-{s}"));
                        let m = commands::train_run(&cfg.with_seed(s), &data, &dir, progress(quiet))?;
                        println!("{}", summary(&m));
                        runs.push(m);
                    }
                    let rows = commands::report_rows(&runs);
                    print!("{}", commands::render_table(&rows));
                }
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
        } => {
            let data = dataset_for(&checkpoint, dataset.as_deref())?;
            let record = commands::eval(&checkpoint, &data)?;
            let line = serde_json::to_string(&record)?;
            println!("{line}");
            if let Some(p) = out {
                fs::write(&p, line + "\n").map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
            }
        }
        Command::Interpret {
            checkpoint,
            dataset,
            samples,
            class,
            out,
        } => {
            let samples = parse_list(&samples, "sample indices")?;
            let classes = match class {
                Some(c) => parse_list(&c, "classes")?,
                None => Vec::new(),
            };
            let data = dataset_for(&checkpoint, dataset.as_deref())?;
            let records = commands::interpret(&checkpoint, &data, &samples, &classes, &out)?;
            println!("wrote {} records to {}", records.len(), out.join(commands::REPORT_FILE).display());
        }
        Command::Report { manifests, out } => {
            let rows = commands::report(&manifests)?;
            print!("{}", commands::render_table(&rows));
            for row in &rows {
                println!("{}", serde_json::to_string(row)?);
            }
            if let Some(p) = out {
                commands::write_jsonl(&p, &rows)?;
            }
        }
    }
    Ok(())
}
