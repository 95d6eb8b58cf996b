//! Multi-chain runs and their reports.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use seqmc_bridge::RemoteScorer;
use seqmc_core::energy::Scorer;
use seqmc_core::oracle::{
    check_sampler, communicating_classes, detailed_balance_residual, enumerate_target, stationary_distribution,
    total_variation, transition_kernel, within_class_tv, ExactDistribution, Kernel, SamplerSpec,
};
use seqmc_core::proposal::BlockPolicy;
use seqmc_core::sampler::{chain_rng, run_chain, ChainResult, SamplerKind};
use seqmc_core::seq::Sequence;
use seqmc_core::trace::Trace;
use seqmc_core::{EnergyKind, TabularMlm};

use crate::config::{ExperimentConfig, RemoteSection, TabularSection};
use crate::error::{AppError, Result};

/// The model an experiment samples from. Remote models get one connection
/// per chain.
pub enum ModelHandle {
    Local(Arc<TabularMlm>),
    Remote {
        section: RemoteSection,
        vocab_size: u32,
        max_length: usize,
        name: String,
    },
}

impl ModelHandle {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        if let Some(r) = &cfg.remote {
            let info = seqmc_bridge::handshake(&r.endpoint()?, &r.client_config())?;
            return Ok(ModelHandle::Remote {
                section: r.clone(),
                vocab_size: info.local_vocab_size(),
                max_length: info.max_length,
                name: info.name,
            });
        }
        let t = cfg.tabular.clone().unwrap_or_default();
        Ok(ModelHandle::Local(Arc::new(load_tabular(&t)?)))
    }

    pub fn open(&self) -> Result<Arc<dyn Scorer>> {
        match self {
            ModelHandle::Local(m) => Ok(m.clone()),
            ModelHandle::Remote { section, .. } => Ok(Arc::new(RemoteScorer::connect(
                section.endpoint()?,
                section.client_config(),
            )?)),
        }
    }

    pub fn local(&self) -> Option<&TabularMlm> {
        match self {
            ModelHandle::Local(m) => Some(m),
            ModelHandle::Remote { .. } => None,
        }
    }

    pub fn max_length(&self) -> usize {
        match self {
            ModelHandle::Local(m) => m.max_length(),
            ModelHandle::Remote { max_length, .. } => *max_length,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            ModelHandle::Local(m) => format!(
                "tabular seed={} vocab_size={} length={} scale={}",
                m.seed(),
                m.vocab().size(),
                m.length(),
                m.scale()
            ),
            ModelHandle::Remote {
                section,
                vocab_size,
                name,
                ..
            } => format!("remote {} ({name}, vocab_size={vocab_size})", section.endpoint),
        }
    }
}

pub fn load_tabular(t: &TabularSection) -> Result<TabularMlm> {
    match &t.file {
        Some(path) => TabularMlm::load(path).map_err(|e| AppError::Config(format!("{}: {e}", path.display()))),
        None => Ok(TabularMlm::generate(t.seed(), t.vocab_size(), t.length(), t.scale())?),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation across chains; 0 for a single chain.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, std }
    }
}

/// Cross-chain statistics of the per-chain epoch means, aligned by epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub burn_in: bool,
    pub energy_raw: Option<Stat>,
    pub energy_norm: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub chain_id: usize,
    pub counted_steps: usize,
    pub acceptance_rate: f64,
    pub novel_rate: f64,
    pub final_state: Vec<u32>,
    pub final_energy_raw: Option<f64>,
    pub final_energy_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub states: usize,
    pub energy: EnergyKind,
    pub classes: usize,
    /// Between the kernel's stationary vector and the target.
    pub stationary_tv: f64,
    pub within_class_tv: f64,
    pub detailed_balance_residual: f64,
    /// Between the pooled collected samples and the target.
    pub empirical_tv: f64,
    pub tv_tolerance: f64,
    pub balance_tolerance: f64,
    /// Tolerances apply to MH only; degenerate Gibbs is not expected to
    /// leave the energy target invariant.
    pub enforced: bool,
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub model: String,
    pub sampler: SamplerKind,
    pub energy: EnergyKind,
    pub length: usize,
    pub chains: Vec<ChainSummary>,
    pub acceptance_rate: Stat,
    pub novel_rate: Stat,
    pub epochs: Vec<EpochStat>,
    pub oracle: Option<OracleReport>,
    pub warnings: Vec<String>,
}

pub struct OracleArtifacts {
    pub target: ExactDistribution,
    pub stationary: Vec<f64>,
    pub kernel: Kernel,
}

pub struct RunOutput {
    pub report: Report,
    pub traces: Vec<Trace>,
    pub samples: Vec<Vec<Sequence>>,
    pub oracle: Option<OracleArtifacts>,
}

/// Acceptance, novelty and per-epoch energy statistics across chains.
pub fn aggregate(traces: &[Trace]) -> (Stat, Stat, Vec<EpochStat>) {
    let acc: Vec<f64> = traces.iter().map(|t| t.acceptance_rate()).collect();
    let novel: Vec<f64> = traces.iter().map(|t| t.novel_rate()).collect();
    let per_chain = |kind| -> Vec<Vec<(usize, Option<f64>)>> {
        traces.iter().map(|t| t.epoch_mean_energies(kind)).collect()
    };
    let raw = per_chain(EnergyKind::Raw);
    let norm = per_chain(EnergyKind::Norm);
    let mut epochs: Vec<usize> = raw.iter().flatten().map(|(e, _)| *e).collect();
    epochs.sort_unstable();
    epochs.dedup();
    let column = |table: &Vec<Vec<(usize, Option<f64>)>>, epoch: usize| -> Option<Stat> {
        let values: Option<Vec<f64>> = table
            .iter()
            .map(|chain| chain.iter().find(|(e, _)| *e == epoch).and_then(|(_, v)| *v))
            .collect();
        values.filter(|v| !v.is_empty()).map(|v| Stat::of(&v))
    };
    let epoch_stats = epochs
        .into_iter()
        .map(|epoch| EpochStat {
            epoch,
            burn_in: traces
                .iter()
                .flat_map(|t| t.records())
                .any(|r| r.epoch == epoch && r.burn_in),
            energy_raw: column(&raw, epoch),
            energy_norm: column(&norm, epoch),
        })
        .collect();
    (Stat::of(&acc), Stat::of(&novel), epoch_stats)
}

/// Histogram of `samples` over the enumerated state space.
pub fn empirical_distribution(samples: &[Vec<Sequence>], states: usize) -> Vec<f64> {
    let mut counts = vec![0.0; states];
    let mut n = 0.0;
    for s in samples.iter().flatten() {
        counts[s.state_index()] += 1.0;
        n += 1.0;
    }
    if n > 0.0 {
        counts.iter_mut().for_each(|c| *c /= n);
    }
    counts
}

fn run_chains(cfg: &ExperimentConfig, model: &ModelHandle, length: usize) -> Result<Vec<ChainResult>> {
    let sc = cfg.sampler_config(length);
    let s = &cfg.sampler;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(s.parallelism)
        .build()
        .map_err(|e| AppError::Config(e.to_string()))?;
    pool.install(|| {
        (0..s.chains)
            .into_par_iter()
            .map(|c| {
                let scorer = model.open()?;
                let stream = if s.same_seed { 0 } else { c as u64 };
                let mut r = run_chain(&*scorer, &sc, chain_rng(s.master_seed, stream))?;
                r.trace.set_chain_id(c);
                if cfg.output.include_burn_in {
                    r.trace = r.trace.including_burn_in();
                }
                Ok(r)
            })
            .collect()
    })
}

fn oracle_section(
    cfg: &ExperimentConfig,
    model: &ModelHandle,
    length: usize,
    samples: &[Vec<Sequence>],
    warnings: &mut Vec<String>,
) -> Result<Option<(OracleReport, OracleArtifacts)>> {
    if !cfg.oracle.enabled {
        return Ok(None);
    }
    let Some(m) = model.local() else {
        warnings.push("oracle skipped: remote models are not enumerated".into());
        return Ok(None);
    };
    if cfg.sampler.anneal.is_some() {
        warnings.push("oracle skipped: annealed target is time-inhomogeneous".into());
        return Ok(None);
    }
    let block_size = match cfg.proposal.block {
        None => 1,
        Some(BlockPolicy::Fixed { size }) => size.min(length),
        Some(BlockPolicy::Annealed { .. }) => {
            warnings.push("oracle skipped: annealed block sizes are time-inhomogeneous".into());
            return Ok(None);
        }
    };
    let spec = SamplerSpec {
        kind: cfg.sampler.kind,
        energy: cfg.energy.kind,
        target_temp: cfg.energy.target_temp,
        block_size,
    };
    let settings = cfg.proposal_settings();
    let target = match enumerate_target(m, length, spec.energy, spec.target_temp) {
        Ok(t) => t,
        Err(e @ seqmc_core::Error::StateSpaceTooLarge { .. }) => {
            warnings.push(format!("oracle skipped: {e}"));
            return Ok(None);
        }
        Err(e) => return Err(e.into()),
    };
    let kernel = transition_kernel(m, length, spec, &settings)?;
    let stationary = stationary_distribution(&kernel)?;
    let classes = communicating_classes(&kernel);
    let stationary_tv = total_variation(&stationary, &target.probs)?;
    let residual = detailed_balance_residual(&kernel, &target.probs)?;
    let enforced = spec.kind == SamplerKind::Mh;
    let o = &cfg.oracle;
    let report = OracleReport {
        states: target.len(),
        energy: spec.energy,
        classes: classes.len(),
        stationary_tv,
        within_class_tv: within_class_tv(&classes, &stationary, &target.probs),
        detailed_balance_residual: residual,
        empirical_tv: total_variation(&empirical_distribution(samples, target.len()), &target.probs)?,
        tv_tolerance: o.tv_tolerance,
        balance_tolerance: o.balance_tolerance,
        enforced,
        violation: enforced && (stationary_tv > o.tv_tolerance || residual > o.balance_tolerance),
    };
    if classes.len() > 1 {
        warnings.push(format!(
            "transition kernel is reducible ({} communicating classes); its stationary vector depends on the start",
            classes.len()
        ));
    }
    Ok(Some((
        report,
        OracleArtifacts {
            target,
            stationary,
            kernel,
        },
    )))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let model = ModelHandle::from_config(cfg)?;
    run_with_model(cfg, &model)
}

pub fn run_with_model(cfg: &ExperimentConfig, model: &ModelHandle) -> Result<RunOutput> {
    let length = cfg.sampler.length.unwrap_or(model.max_length());
    if model.local().is_some() && length != model.max_length() {
        return Err(AppError::Config(format!(
            "sampler length {length} differs from table length {}",
            model.max_length()
        )));
    }
    let results = run_chains(cfg, model, length)?;
    let mut warnings = Vec::new();
    let traces: Vec<Trace> = results.iter().map(|r| r.trace.clone()).collect();
    let samples: Vec<Vec<Sequence>> = results.iter().map(|r| r.samples.clone()).collect();
    let (acceptance_rate, novel_rate, epochs) = aggregate(&traces);
    let chains = results
        .iter()
        .zip(&traces)
        .map(|(r, t)| {
            let last = t.records().last();
            ChainSummary {
                chain_id: t.chain_id(),
                counted_steps: t.counted_steps(),
                acceptance_rate: t.acceptance_rate(),
                novel_rate: t.novel_rate(),
                final_state: r.final_state.tokens().to_vec(),
                final_energy_raw: last.and_then(|l| l.energy_raw),
                final_energy_norm: last.and_then(|l| l.energy_norm),
            }
        })
        .collect();
    let oracle = oracle_section(cfg, model, length, &samples, &mut warnings)?;
    let (oracle_report, artifacts) = match oracle {
        Some((r, a)) => (Some(r), Some(a)),
        None => (None, None),
    };
    Ok(RunOutput {
        report: Report {
            config_hash: cfg.hash(),
            model: model.describe(),
            sampler: cfg.sampler.kind,
            energy: cfg.energy.kind,
            length,
            chains,
            acceptance_rate,
            novel_rate,
            epochs,
            oracle: oracle_report,
            warnings,
        },
        traces,
        samples,
        oracle: artifacts,
    })
}

/// Exact checks only, no chains.
pub fn run_oracle(cfg: &ExperimentConfig) -> Result<seqmc_core::oracle::OracleCheck> {
    cfg.validate()?;
    let t = cfg
        .tabular
        .as_ref()
        .ok_or_else(|| AppError::Config("the oracle needs a tabular model".into()))?;
    let m = load_tabular(t)?;
    let block_size = match cfg.proposal.block {
        None => 1,
        Some(BlockPolicy::Fixed { size }) => size,
        Some(BlockPolicy::Annealed { .. }) => {
            return Err(AppError::Config("the oracle needs a fixed block size".into()))
        }
    };
    if cfg.sampler.anneal.is_some() {
        return Err(AppError::Config("the oracle cannot check annealed runs".into()));
    }
    let spec = SamplerSpec {
        kind: cfg.sampler.kind,
        energy: cfg.energy.kind,
        target_temp: cfg.energy.target_temp,
        block_size,
    };
    Ok(check_sampler(&m, m.length(), spec, &cfg.proposal_settings())?)
}
