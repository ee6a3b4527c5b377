use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use constyx::harness::{self, plot, Method, RunConfig};
use constyx::synth::{self, default_domains};
use constyx::Error;

/// Content-style feature augmentation: benchmark generation, training,
/// evaluation and ablations.
#[derive(Parser)]
#[command(name = "constyx", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain benchmark.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Number of built-in domains to use (2-5).
        #[arg(long, default_value_t = 5)]
        domains: usize,
        #[arg(long, default_value_t = 80)]
        per_domain: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on one source domain and evaluate on the rest.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        source: Option<usize>,
        #[arg(long, value_parser = ["baseline", "dfa", "constyx"])]
        method: Option<String>,
        /// JSON object or key=value file overriding the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Drop the original-feature loss term.
        #[arg(long)]
        aug_only: bool,
        /// Continue from the last completed epoch in the output directory.
        #[arg(long)]
        resume: bool,
        /// Write per-epoch loss and DSC curves as SVG.
        #[arg(long)]
        plot: bool,
    },
    /// Evaluate a checkpoint on every non-source domain.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for metrics.json and metrics.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation matrix over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Preset (table2, table3-position, table3-distribution) or JSON file of cells.
        #[arg(long, default_value = "table2")]
        matrix: String,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Base config applied before each cell's overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Reuse finished runs with identical configs.
        #[arg(long)]
        reuse: bool,
    },
}

fn write_file(path: &Path, contents: &str) -> constyx::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> constyx::Result<()> {
    match cli.command {
        Command::Gen {
            out,
            domains,
            per_domain,
            size,
            seed,
        } => {
            let all = default_domains();
            if !(2..=all.len()).contains(&domains) {
                return Err(Error::InvalidArgument(format!(
                    "--domains must be between 2 and {}, got {domains}",
                    all.len()
                )));
            }
            let manifest =
                synth::generate_benchmark(&all[..domains], per_domain, size, seed, &out)?;
            println!(
                "wrote {} domains x {} samples ({}x{}) to {}",
                manifest.domains.len(),
                manifest.per_domain,
                size,
                size,
                out.display()
            );
        }
        Command::Train {
            data,
            source,
            method,
            config,
            seed,
            out,
            epochs,
            aug_only,
            resume,
            plot: want_plot,
        } => {
            let mut cfg = match config {
                Some(path) => RunConfig::from_file(path)?,
                None => RunConfig::default(),
            };
            if let Some(d) = data {
                cfg.data = d;
            }
            if let Some(s) = source {
                cfg.source_domain = s;
            }
            if let Some(m) = method {
                cfg.method = m.parse::<Method>()?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg.aug_only |= aug_only;
            let outcome = harness::run_training(&cfg, resume)?;
            print!("{}", outcome.log.final_eval.to_table(&["disc", "cup"]));
            println!("validation DSC {:.2}", 100.0 * outcome.log.val_eval.average);
            if want_plot {
                let (loss, dsc) = plot::run_charts(&outcome.log);
                write_file(&cfg.out.join("loss.svg"), &loss)?;
                write_file(&cfg.out.join("val_dsc.svg"), &dsc)?;
            }
        }
        Command::Eval {
            checkpoint,
            data,
            out,
        } => {
            let result = harness::evaluate_checkpoint(&checkpoint, &data)?;
            write_file(
                &out.join(harness::METRICS_FILE),
                &serde_json::to_string_pretty(&result)?,
            )?;
            let table = result.to_table(&["disc", "cup"]);
            write_file(&out.join("metrics.txt"), &table)?;
            print!("{table}");
        }
        Command::Ablate {
            data,
            matrix,
            seeds,
            out,
            config,
            epochs,
            reuse,
        } => {
            let mut base = match config {
                Some(path) => RunConfig::from_file(path)?,
                None => RunConfig::default(),
            };
            base.data = data;
            if let Some(e) = epochs {
                base.epochs = e;
            }
            let cells = harness::load_matrix(&matrix)?;
            let report = harness::run_ablation(&base, &cells, &seeds, &out, reuse)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Json(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
