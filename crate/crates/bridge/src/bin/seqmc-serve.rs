//! Serves a tabular model file over protocol v1.

use std::io::{stdin, stdout, BufReader};
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use seqmc_bridge::server::{serve, serve_tcp};
use seqmc_core::TabularMlm;

#[derive(Parser)]
#[command(version, about = "Serve a tabular model file over the scorer protocol")]
struct Args {
    /// Model file written by `seqmc` or `TabularMlm::save`.
    #[arg(long)]
    model: PathBuf,
    /// Listen on this address instead of speaking over stdin/stdout.
    #[arg(long)]
    listen: Option<String>,
    #[arg(long, default_value = "tabular")]
    name: String,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let model = match TabularMlm::load(&args.model) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("seqmc-serve: {}: {e}", args.model.display());
            return ExitCode::FAILURE;
        }
    };
    let result = match &args.listen {
        Some(addr) => TcpListener::bind(addr).and_then(|l| {
            eprintln!("seqmc-serve: listening on {}", l.local_addr()?);
            serve_tcp(&model, &args.name, l)
        }),
        None => serve(&model, &args.name, BufReader::new(stdin().lock()), stdout().lock()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("seqmc-serve: {e}");
            ExitCode::FAILURE
        }
    }
}
