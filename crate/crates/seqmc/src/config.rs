//! Experiment configuration.
//!
//! A TOML file whose sections are named after the library modules:
//!
//! ```toml
//! [seq-core]          # a seeded tabular model (or `file = "m.sqmc"`)
//! seed = 7
//! vocab_size = 3
//! length = 3
//!
//! [energy]
//! kind = "raw"
//!
//! [proposal]
//! temperature = 0.5
//! block = { mode = "fixed", size = 2 }
//!
//! [sampler]
//! kind = "mh"
//! epochs = 33
//! burn_in = 7
//! chains = 5
//! ```
//!
//! Unknown keys are errors. `[scorer-bridge]` with an `endpoint` replaces
//! `[seq-core]` for remote models. Precedence, lowest first: file, the
//! `SEQMC_SEED` environment variable (master seed only), command-line flags.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::Args;
use serde::de::{DeserializeOwned, IntoDeserializer};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use seqmc_bridge::{ClientConfig, Endpoint};
use seqmc_core::proposal::{BlockPolicy, ProposalSettings, ScanOrder};
use seqmc_core::sampler::{AnnealSchedule, Collect, SamplerConfig, SamplerKind, WarmStart};
use seqmc_core::tabular::DEFAULT_SCALE;
use seqmc_core::EnergyKind;

use crate::error::{AppError, Result};
use crate::export::Format;

pub const SEED_ENV: &str = "SEQMC_SEED";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(rename = "seq-core", default, skip_serializing_if = "Option::is_none")]
    pub tabular: Option<TabularSection>,
    #[serde(rename = "scorer-bridge", default, skip_serializing_if = "Option::is_none")]
    pub remote: Option<RemoteSection>,
    #[serde(default)]
    pub energy: EnergySection,
    #[serde(default)]
    pub proposal: ProposalSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(rename = "diag-io", default)]
    pub output: OutputSection,
}

/// A generated table, or one loaded from `file`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

impl TabularSection {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
    pub fn vocab_size(&self) -> u32 {
        self.vocab_size.unwrap_or(3)
    }
    pub fn length(&self) -> usize {
        self.length.unwrap_or(3)
    }
    pub fn scale(&self) -> f64 {
        self.scale.unwrap_or(DEFAULT_SCALE)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteSection {
    /// `tcp://host:port` or `cmd:program args`
    pub endpoint: String,
    pub connect_timeout_ms: u64,
    pub io_timeout_ms: u64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub window: usize,
}

impl Default for RemoteSection {
    fn default() -> Self {
        let c = ClientConfig::default();
        RemoteSection {
            endpoint: String::new(),
            connect_timeout_ms: c.connect_timeout.as_millis() as u64,
            io_timeout_ms: c.io_timeout.as_millis() as u64,
            retries: c.retries,
            backoff_ms: c.backoff.as_millis() as u64,
            window: c.window,
        }
    }
}

impl RemoteSection {
    pub fn endpoint(&self) -> Result<Endpoint> {
        self.endpoint.parse().map_err(|e: seqmc_bridge::BridgeError| AppError::Config(e.to_string()))
    }

    pub fn client_config(&self) -> ClientConfig {
        ClientConfig {
            connect_timeout: Duration::from_millis(self.connect_timeout_ms),
            io_timeout: Duration::from_millis(self.io_timeout_ms),
            retries: self.retries,
            backoff: Duration::from_millis(self.backoff_ms),
            window: self.window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergySection {
    pub kind: EnergyKind,
    pub target_temp: f64,
}

impl Default for EnergySection {
    fn default() -> Self {
        EnergySection {
            kind: EnergyKind::Raw,
            target_temp: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalSection {
    pub temperature: f64,
    pub nucleus: f64,
    pub scan: ScanOrder,
    /// Absent: single-position steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block: Option<BlockPolicy>,
}

impl Default for ProposalSection {
    fn default() -> Self {
        let p = ProposalSettings::default();
        ProposalSection {
            temperature: p.temperature,
            nucleus: p.nucleus,
            scan: ScanOrder::default(),
            block: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    /// Sequence length; defaults to the model's.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    /// Total epochs, burn-in included.
    pub epochs: usize,
    pub burn_in: usize,
    pub chains: usize,
    pub master_seed: u64,
    /// Chains run at once; 0 uses every core.
    pub parallelism: usize,
    pub warm_start: WarmStart,
    pub force_accept_epochs: usize,
    pub collect: Collect,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anneal: Option<AnnealSchedule>,
    pub track_both: bool,
    /// Every chain uses the same random stream (debugging aid).
    pub same_seed: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            kind: SamplerKind::Mh,
            length: None,
            epochs: 33,
            burn_in: 7,
            chains: 5,
            master_seed: 0,
            parallelism: 0,
            warm_start: WarmStart::Greedy,
            force_accept_epochs: 0,
            collect: Collect::EpochEnd,
            anneal: None,
            track_both: true,
            same_seed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    /// Run exact checks whenever the model can be enumerated.
    pub enabled: bool,
    pub tv_tolerance: f64,
    pub balance_tolerance: f64,
    /// Also write the transition kernel as CSV.
    pub write_kernel: bool,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            enabled: true,
            tv_tolerance: 1e-6,
            balance_tolerance: 1e-10,
            write_kernel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Parent of the per-run directories.
    pub dir: PathBuf,
    pub format: Format,
    /// Count burn-in steps in the reported rates.
    pub include_burn_in: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs"),
            format: Format::Csv,
            include_burn_in: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    /// Applies `SEQMC_SEED` as looked up by `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = var(SEED_ENV) {
            self.sampler.master_seed = v
                .trim()
                .parse()
                .map_err(|_| AppError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AppError::Config(m));
        if self.tabular.is_some() && self.remote.is_some() {
            return bad("[seq-core] and [scorer-bridge] are mutually exclusive".into());
        }
        if let Some(t) = &self.tabular {
            if t.file.is_some() && (t.seed.is_some() || t.vocab_size.is_some() || t.length.is_some() || t.scale.is_some()) {
                return bad("[seq-core] file cannot be combined with seed, vocab_size, length or scale".into());
            }
            if let Some(len) = self.sampler.length {
                if t.file.is_none() && len != t.length() {
                    return bad(format!(
                        "sampler length {len} differs from table length {}",
                        t.length()
                    ));
                }
            }
        }
        if let Some(r) = &self.remote {
            r.endpoint()?;
            if r.window == 0 {
                return bad("[scorer-bridge] window must be at least 1".into());
            }
        }
        let s = &self.sampler;
        if s.chains == 0 {
            return bad("chains must be at least 1".into());
        }
        if s.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if s.burn_in >= s.epochs {
            return bad(format!("burn_in {} must be below epochs {}", s.burn_in, s.epochs));
        }
        if !(self.oracle.tv_tolerance >= 0.0 && self.oracle.balance_tolerance >= 0.0) {
            return bad("oracle tolerances must be non-negative".into());
        }
        self.sampler_config(1).validate(usize::MAX)?;
        Ok(())
    }

    pub fn proposal_settings(&self) -> ProposalSettings {
        ProposalSettings {
            temperature: self.proposal.temperature,
            nucleus: self.proposal.nucleus,
        }
    }

    pub fn sampler_config(&self, length: usize) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            kind: s.kind,
            energy: self.energy.kind,
            length,
            proposal: self.proposal_settings(),
            block: self.proposal.block,
            scan: self.proposal.scan,
            warm_start: s.warm_start,
            initial: None,
            epochs: s.epochs,
            burn_in: s.burn_in,
            target_temp: self.energy.target_temp,
            anneal: s.anneal,
            force_accept_epochs: s.force_accept_epochs,
            collect: s.collect,
            track_both: s.track_both,
        }
    }

    /// SHA-256 over the canonical JSON form, output location excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output.dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("configuration always serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Parses a snake_case variant name the way the config file does.
pub fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    T::deserialize(s.into_deserializer()).map_err(|e: serde::de::value::Error| e.to_string())
}

/// Command-line overrides, applied on top of the file and environment.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Seed of the generated tabular model.
    #[arg(long)]
    pub model_seed: Option<u64>,
    #[arg(long)]
    pub vocab_size: Option<u32>,
    /// Table length, or sequence length for remote models.
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub scale: Option<f64>,
    /// Load the tabular model from this file.
    #[arg(long)]
    pub model_file: Option<PathBuf>,
    /// Remote scorer: tcp://host:port or cmd:program args.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// raw or norm
    #[arg(long, value_parser = parse_enum::<EnergyKind>)]
    pub energy: Option<EnergyKind>,
    #[arg(long)]
    pub target_temp: Option<f64>,
    /// Proposal temperature.
    #[arg(long)]
    pub proposal_temp: Option<f64>,
    #[arg(long)]
    pub nucleus: Option<f64>,
    /// Fixed block size; 0 or 1 means single-position steps.
    #[arg(long)]
    pub block_size: Option<usize>,
    /// Annealed blocks starting at this fraction of the length.
    #[arg(long, conflicts_with = "block_size")]
    pub block_fraction: Option<f64>,
    /// left_to_right or random
    #[arg(long, value_parser = parse_enum::<ScanOrder>)]
    pub scan: Option<ScanOrder>,
    /// mh or deg_gibbs
    #[arg(long, value_parser = parse_enum::<SamplerKind>)]
    pub sampler: Option<SamplerKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub master_seed: Option<u64>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// greedy or sample_all
    #[arg(long, value_parser = parse_enum::<WarmStart>)]
    pub warm_start: Option<WarmStart>,
    /// epoch_end or every_step
    #[arg(long, value_parser = parse_enum::<Collect>)]
    pub collect: Option<Collect>,
    /// Linear target-temperature decay per epoch.
    #[arg(long)]
    pub anneal_rate: Option<f64>,
    #[arg(long, requires = "anneal_rate")]
    pub anneal_floor: Option<f64>,
    #[arg(long, requires = "anneal_rate")]
    pub anneal_initial: Option<f64>,
    #[arg(long)]
    pub force_accept_epochs: Option<usize>,
    /// csv or jsonl
    #[arg(long, value_parser = parse_enum::<Format>)]
    pub format: Option<Format>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub include_burn_in: bool,
    #[arg(long)]
    pub no_oracle: bool,
    #[arg(long)]
    pub write_kernel: bool,
}

impl Overrides {
    fn touches_tabular(&self) -> bool {
        self.model_seed.is_some() || self.vocab_size.is_some() || self.scale.is_some() || self.model_file.is_some()
    }

    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if self.endpoint.is_some() && self.touches_tabular() {
            return Err(AppError::Config(
                "--endpoint cannot be combined with tabular model flags".into(),
            ));
        }
        if let Some(ep) = &self.endpoint {
            cfg.tabular = None;
            cfg.remote.get_or_insert_with(RemoteSection::default).endpoint = ep.clone();
        }
        if self.touches_tabular() {
            cfg.remote = None;
            let t = cfg.tabular.get_or_insert_with(TabularSection::default);
            if let Some(f) = &self.model_file {
                *t = TabularSection {
                    file: Some(f.clone()),
                    ..TabularSection::default()
                };
            }
            if self.model_seed.is_some() {
                t.seed = self.model_seed;
            }
            if self.vocab_size.is_some() {
                t.vocab_size = self.vocab_size;
            }
            if self.scale.is_some() {
                t.scale = self.scale;
            }
        }
        if let Some(len) = self.length {
            match &mut cfg.tabular {
                Some(t) if t.file.is_none() => t.length = Some(len),
                _ => cfg.sampler.length = Some(len),
            }
        }
        if let Some(v) = self.energy {
            cfg.energy.kind = v;
        }
        if let Some(v) = self.target_temp {
            cfg.energy.target_temp = v;
        }
        if let Some(v) = self.proposal_temp {
            cfg.proposal.temperature = v;
        }
        if let Some(v) = self.nucleus {
            cfg.proposal.nucleus = v;
        }
        match (self.block_size, self.block_fraction) {
            (Some(0 | 1), _) => cfg.proposal.block = None,
            (Some(size), _) => cfg.proposal.block = Some(BlockPolicy::Fixed { size }),
            (None, Some(f)) => cfg.proposal.block = Some(BlockPolicy::Annealed { initial_fraction: f }),
            (None, None) => {}
        }
        if let Some(v) = self.scan {
            cfg.proposal.scan = v;
        }
        let s = &mut cfg.sampler;
        if let Some(v) = self.sampler {
            s.kind = v;
        }
        if let Some(v) = self.epochs {
            s.epochs = v;
        }
        if let Some(v) = self.burn_in {
            s.burn_in = v;
        }
        if let Some(v) = self.chains {
            s.chains = v;
        }
        if let Some(v) = self.master_seed {
            s.master_seed = v;
        }
        if let Some(v) = self.parallelism {
            s.parallelism = v;
        }
        if let Some(v) = self.warm_start {
            s.warm_start = v;
        }
        if let Some(v) = self.collect {
            s.collect = v;
        }
        if let Some(rate) = self.anneal_rate {
            let mut a = s.anneal.unwrap_or_default();
            a.rate = rate;
            if let Some(f) = self.anneal_floor {
                a.floor = f;
            }
            if let Some(i) = self.anneal_initial {
                a.initial = i;
            }
            s.anneal = Some(a);
        }
        if let Some(v) = self.force_accept_epochs {
            s.force_accept_epochs = v;
        }
        if let Some(v) = self.format {
            cfg.output.format = v;
        }
        if let Some(v) = &self.output_dir {
            cfg.output.dir = v.clone();
        }
        if self.include_burn_in {
            cfg.output.include_burn_in = true;
        }
        if self.no_oracle {
            cfg.oracle.enabled = false;
        }
        if self.write_kernel {
            cfg.oracle.write_kernel = true;
        }
        Ok(())
    }
}

/// File, then environment, then flags; validated.
pub fn resolve(
    file: Option<&Path>,
    env: impl Fn(&str) -> Option<String>,
    overrides: &Overrides,
) -> Result<ExperimentConfig> {
    let mut cfg = match file {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env(env)?;
    overrides.apply(&mut cfg)?;
    if cfg.tabular.is_none() && cfg.remote.is_none() {
        cfg.tabular = Some(TabularSection::default());
    }
    cfg.validate()?;
    Ok(cfg)
}
