//! Run directories and the `compare` and `counterexample` workflows.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use seqmc_core::oracle::{bayes_consistency_gap, write_distribution_csv, ConditionalTable};
use seqmc_core::sampler::SamplerKind;
use seqmc_core::EnergyKind;

use crate::config::ExperimentConfig;
use crate::error::{AppError, Result};
use crate::experiment::{run_with_model, EpochStat, ModelHandle, Report, RunOutput};
use crate::export::{export_traces, write_samples, ExportMeta};

fn io_err(path: &Path, e: impl std::fmt::Display) -> AppError {
    AppError::Io(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| io_err(path, e))
}

/// `<root>/<UTC timestamp>-<first 12 hex digits of the config hash>`, created.
pub fn create_run_dir(root: &Path, config_hash: &str) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    let base = root.join(format!("{stamp}-{}", &config_hash[..12]));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| AppError::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Writes config, report, trace, samples and any oracle vectors into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(|e| io_err(dir, e))?;
    write_json(&dir.join("report.json"), &out.report)?;
    let format = cfg.output.format;
    export_traces(
        &dir.join(format!("trace.{}", format.extension())),
        format,
        &ExportMeta::new(&out.report.config_hash),
        &out.traces,
    )?;
    write_samples(create(&dir.join("samples.csv"))?, &out.samples)?;
    if let Some(o) = &out.oracle {
        o.target.write_csv(create(&dir.join("target.csv"))?)?;
        write_distribution_csv(create(&dir.join("stationary.csv"))?, &o.stationary)?;
        if cfg.oracle.write_kernel {
            o.kernel.write_csv(create(&dir.join("kernel.csv"))?)?;
        }
    }
    Ok(())
}

pub const COMPARE_VARIANTS: [&str; 3] = ["mh_raw", "mh_norm", "deg_gibbs"];

pub struct Comparison {
    pub reports: Vec<(String, Report)>,
    pub outputs: Vec<RunOutput>,
}

/// Runs MH on both energies and degenerate Gibbs on one model, recording
/// both energies in every chain.
pub fn compare(base: &ExperimentConfig) -> Result<Comparison> {
    base.validate()?;
    let model = ModelHandle::from_config(base)?;
    let mut reports = Vec::new();
    let mut outputs = Vec::new();
    for name in COMPARE_VARIANTS {
        let mut cfg = base.clone();
        cfg.sampler.track_both = true;
        match name {
            "mh_raw" => {
                cfg.sampler.kind = SamplerKind::Mh;
                cfg.energy.kind = EnergyKind::Raw;
            }
            "mh_norm" => {
                cfg.sampler.kind = SamplerKind::Mh;
                cfg.energy.kind = EnergyKind::Norm;
            }
            _ => cfg.sampler.kind = SamplerKind::DegGibbs,
        }
        let out = run_with_model(&cfg, &model)?;
        reports.push((name.to_string(), out.report.clone()));
        outputs.push(out);
    }
    Ok(Comparison { reports, outputs })
}

fn cell(s: Option<crate::experiment::Stat>) -> [String; 2] {
    match s {
        Some(s) => [format!("{:?}", s.mean), format!("{:?}", s.std)],
        None => [String::new(), String::new()],
    }
}

/// One row per epoch; for each variant, mean and std of both energies.
pub fn write_comparison_csv<W: Write>(w: W, reports: &[(String, Report)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["epoch".to_string(), "burn_in".to_string()];
    for (name, _) in reports {
        for e in ["energy_raw", "energy_norm"] {
            header.push(format!("{name}_{e}_mean"));
            header.push(format!("{name}_{e}_std"));
        }
    }
    out.write_record(&header).map_err(|e| AppError::Io(e.to_string()))?;
    let epochs = reports.first().map(|(_, r)| r.epochs.len()).unwrap_or(0);
    for i in 0..epochs {
        let first: &EpochStat = &reports[0].1.epochs[i];
        let mut row = vec![first.epoch.to_string(), first.burn_in.to_string()];
        for (_, r) in reports {
            let e = r.epochs.get(i);
            row.extend(cell(e.and_then(|e| e.energy_raw)));
            row.extend(cell(e.and_then(|e| e.energy_norm)));
        }
        out.write_record(&row).map_err(|e| AppError::Io(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_comparison(dir: &Path, base: &ExperimentConfig, c: &Comparison) -> Result<()> {
    fs::write(dir.join("config.toml"), base.to_toml()).map_err(|e| io_err(dir, e))?;
    write_comparison_csv(create(&dir.join("compare.csv"))?, &c.reports)?;
    let format = base.output.format;
    for ((name, report), out) in c.reports.iter().zip(&c.outputs) {
        write_json(&dir.join(format!("report_{name}.json")), report)?;
        export_traces(
            &dir.join(format!("trace_{name}.{}", format.extension())),
            format,
            &ExportMeta::new(&report.config_hash),
            &out.traces,
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterexampleReport {
    pub source: String,
    pub size: usize,
    pub gap: f64,
    pub consistent: bool,
}

/// Gap of the built-in inconsistent pair, or of two user table files.
pub fn counterexample(files: Option<(&Path, &Path)>, tolerance: f64) -> Result<CounterexampleReport> {
    let (source, c12, c21) = match files {
        None => {
            let (a, b) = ConditionalTable::inconsistent_example();
            ("built-in".to_string(), a, b)
        }
        Some((p12, p21)) => {
            let read = |p: &Path| -> Result<ConditionalTable> {
                let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                ConditionalTable::parse(&text).map_err(|e| AppError::Config(format!("{}: {e}", p.display())))
            };
            (format!("{} {}", p12.display(), p21.display()), read(p12)?, read(p21)?)
        }
    };
    let gap = bayes_consistency_gap(&c12, &c21).map_err(|e| AppError::Config(e.to_string()))?;
    Ok(CounterexampleReport {
        source,
        size: c12.size(),
        gap,
        consistent: gap <= tolerance,
    })
}
