use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seqmc::config::{resolve, ExperimentConfig, Overrides};
use seqmc::error::{AppError, Result};
use seqmc::experiment::{load_tabular, run_experiment, run_oracle};
use seqmc::run::{compare, counterexample, create_run_dir, write_comparison, write_run};
use seqmc::config::TabularSection;
use seqmc_core::sampler::SamplerKind;

#[derive(Parser)]
#[command(name = "seqmc", version, about = "MCMC sampling from masked language model conditionals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment file; flags override it, SEQMC_SEED overrides its master seed.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        resolve(self.config.as_deref(), |k| std::env::var(k).ok(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run chains and write a run directory.
    Sample(ConfigArgs),
    /// Exact stationarity and detailed-balance checks, no chains.
    Oracle(ConfigArgs),
    /// MH on raw and normalized energies plus degenerate Gibbs on one model.
    Compare(ConfigArgs),
    /// Consistency gap of two conditional tables.
    Counterexample {
        /// Table of p(x1 | x2): row b holds the distribution over a.
        #[arg(long, requires = "c21")]
        c12: Option<PathBuf>,
        /// Table of p(x2 | x1): row a holds the distribution over b.
        #[arg(long, requires = "c12")]
        c21: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
    },
    /// Generate a tabular model and save it.
    Model {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        vocab_size: u32,
        #[arg(long, default_value_t = 3)]
        length: usize,
        #[arg(long, default_value_t = 2.0)]
        scale: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sample(args) => {
            let cfg = args.resolve()?;
            let out = run_experiment(&cfg)?;
            let dir = create_run_dir(&cfg.output.dir, &out.report.config_hash)?;
            write_run(&dir, &cfg, &out)?;
            let r = &out.report;
            println!("run directory: {}", dir.display());
            println!(
                "acceptance {:.4} ± {:.4}, novel {:.4} ± {:.4}",
                r.acceptance_rate.mean, r.acceptance_rate.std, r.novel_rate.mean, r.novel_rate.std
            );
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(o) = &r.oracle {
                println!(
                    "oracle: stationary TV {:e}, detailed-balance residual {:e}, {} class(es)",
                    o.stationary_tv, o.detailed_balance_residual, o.classes
                );
                if o.violation {
                    return Err(AppError::OracleViolation(format!(
                        "stationary TV {:e} (tol {:e}), residual {:e} (tol {:e})",
                        o.stationary_tv, o.tv_tolerance, o.detailed_balance_residual, o.balance_tolerance
                    )));
                }
            }
            Ok(())
        }
        Command::Oracle(args) => {
            let cfg = args.resolve()?;
            let check = run_oracle(&cfg)?;
            print_json(&check);
            let o = &cfg.oracle;
            if cfg.sampler.kind == SamplerKind::Mh
                && (check.stationary_tv > o.tv_tolerance || check.detailed_balance_residual > o.balance_tolerance)
            {
                return Err(AppError::OracleViolation(format!(
                    "stationary TV {:e}, residual {:e}",
                    check.stationary_tv, check.detailed_balance_residual
                )));
            }
            Ok(())
        }
        Command::Compare(args) => {
            let cfg = args.resolve()?;
            let c = compare(&cfg)?;
            let dir = create_run_dir(&cfg.output.dir, &cfg.hash())?;
            write_comparison(&dir, &cfg, &c)?;
            println!("run directory: {}", dir.display());
            for (name, r) in &c.reports {
                println!(
                    "{name}: acceptance {:.4}, novel {:.4}",
                    r.acceptance_rate.mean, r.novel_rate.mean
                );
            }
            Ok(())
        }
        Command::Counterexample { c12, c21, tolerance } => {
            let files = c12.as_deref().zip(c21.as_deref());
            print_json(&counterexample(files, tolerance)?);
            Ok(())
        }
        Command::Model {
            seed,
            vocab_size,
            length,
            scale,
            out,
        } => {
            let m = load_tabular(&TabularSection {
                file: None,
                seed: Some(seed),
                vocab_size: Some(vocab_size),
                length: Some(length),
                scale: Some(scale),
            })?;
            m.save(&out).map_err(|e| AppError::Io(format!("{}: {e}", out.display())))?;
            println!("wrote {} ({} rows)", out.display(), m.row_count());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("seqmc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
