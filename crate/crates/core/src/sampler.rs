//! Metropolis-Hastings over sequences with masked-conditional proposals,
//! plus the degenerate Gibbs baseline that always accepts.
//!
//! One epoch is one sweep that visits every position once, either one
//! position per step or, in block mode, `ceil(T / k)` blocks drawn from a
//! random partition. The target is `p(X) ∝ exp(-E(X) / target_temp)`; the
//! temperature scales only the energy difference, never the proposal ratio.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{energies, positional_logits, softmax, Energies, Energy, EnergyKind, Scorer};
use crate::error::{Error, Result};
use crate::proposal::{
    block_schedule, position_schedule, propose_block, BlockPolicy, Proposal, ProposalSettings,
    ScanOrder,
};
use crate::seq::{apply_mask, Sequence, TokenId};
use crate::trace::{StepContext, StepOutcome, Trace};

/// Independent, reproducible random stream for chain `chain` of a run.
pub fn chain_rng(master_seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(chain);
    rng
}

#[derive(Debug, Clone)]
pub struct ChainState {
    pub current: Sequence,
    energies: Energies,
    pub kind: EnergyKind,
    pub epoch: usize,
    pub step: usize,
    pub target_temp: f64,
    /// Accept every proposal regardless of the acceptance ratio. Breaks
    /// detailed balance; only for trajectory-alignment warm-up epochs.
    pub force_accept: bool,
    pub rng: ChaCha8Rng,
}

impl ChainState {
    pub fn new<S: Scorer + ?Sized>(
        model: &S,
        kind: EnergyKind,
        start: Sequence,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let energies = energies(model, &start)?;
        Ok(ChainState {
            current: start,
            energies,
            kind,
            epoch: 0,
            step: 0,
            target_temp: 1.0,
            force_accept: false,
            rng,
        })
    }

    pub fn current_energy(&self) -> Energy {
        Energy {
            value: self.energies.get(self.kind),
            kind: self.kind,
        }
    }

    /// Cached raw and normalized energies of `current`.
    pub fn energies(&self) -> Energies {
        self.energies
    }

    /// Absolute difference between the cached energy and a fresh evaluation.
    pub fn energy_drift<S: Scorer + ?Sized>(&self, model: &S) -> Result<f64> {
        let fresh = energies(model, &self.current)?;
        Ok((fresh.get(self.kind) - self.energies.get(self.kind)).abs())
    }
}

/// Log acceptance probability of an MH move.
pub fn log_acceptance(energy_old: f64, energy_new: f64, target_temp: f64, log_q_fwd: f64, log_q_rev: f64) -> f64 {
    if log_q_rev == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    ((energy_old - energy_new) / target_temp + log_q_rev - log_q_fwd).min(0.0)
}

/// One Metropolis-Hastings accept/reject decision for `prop`, which must have
/// been built from `state.current`.
///
/// A scorer failure leaves the chain untouched.
pub fn mh_step<S: Scorer + ?Sized>(
    model: &S,
    state: &mut ChainState,
    prop: Proposal,
) -> Result<StepOutcome> {
    let energy_old = state.energies.get(state.kind);
    let new_energies = if prop.is_self() {
        state.energies
    } else {
        energies(model, &prop.candidate)?
    };
    let energy_new = new_energies.get(state.kind);
    let log_a = if state.force_accept {
        0.0
    } else {
        log_acceptance(energy_old, energy_new, state.target_temp, prop.log_q_fwd, prop.log_q_rev)
    };
    // u in (0, 1] so that a zero acceptance can never pass
    let u = 1.0 - state.rng.gen::<f64>();
    let accepted = u.ln() <= log_a;
    let novel = accepted && !prop.is_self();
    if accepted {
        state.current = prop.candidate;
        state.energies = new_energies;
    }
    Ok(StepOutcome {
        accepted,
        novel,
        acceptance_prob: log_a.exp(),
        energy_old,
        energy_new,
        log_q_fwd: prop.log_q_fwd,
        log_q_rev: prop.log_q_rev,
    })
}

/// Resamples `pos` from its shaped conditional and always moves.
pub fn degenerate_gibbs_step<S: Scorer + ?Sized>(
    model: &S,
    state: &mut ChainState,
    pos: usize,
    settings: &ProposalSettings,
) -> Result<StepOutcome> {
    degenerate_block_gibbs_step(model, state, &[pos], settings)
}

/// Block variant: all positions resampled from the jointly masked context.
pub fn degenerate_block_gibbs_step<S: Scorer + ?Sized>(
    model: &S,
    state: &mut ChainState,
    positions: &[usize],
    settings: &ProposalSettings,
) -> Result<StepOutcome> {
    let prop = propose_block(model, &state.current, positions, settings, &mut state.rng)?;
    let energy_old = state.energies.get(state.kind);
    let new_energies = if prop.is_self() {
        state.energies
    } else {
        energies(model, &prop.candidate)?
    };
    let novel = !prop.is_self();
    state.current = prop.candidate;
    state.energies = new_energies;
    Ok(StepOutcome {
        accepted: true,
        novel,
        acceptance_prob: 1.0,
        energy_old,
        energy_new: new_energies.get(state.kind),
        log_q_fwd: prop.log_q_fwd,
        log_q_rev: prop.log_q_rev,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    #[default]
    Greedy,
    SampleAll,
}

/// Fills an all-mask string left to right, each position conditioned on the
/// tokens filled so far with every later position still masked.
pub fn warm_start<S: Scorer + ?Sized, R: Rng + ?Sized>(
    model: &S,
    len: usize,
    mode: WarmStart,
    rng: &mut R,
) -> Result<Sequence> {
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    let vocab = model.vocab();
    let mut tokens: Vec<TokenId> = vec![0; len];
    for t in 0..len {
        let partial = Sequence::new(tokens.clone(), vocab)?;
        let remaining: Vec<usize> = (t..len).collect();
        let view = apply_mask(&partial, &remaining)?;
        let rows = positional_logits(model, &view)?;
        let row = &rows[0].1;
        tokens[t] = match mode {
            WarmStart::Greedy => argmax_lowest(row.values()),
            WarmStart::SampleAll => softmax(row.values()).sample(rng),
        };
    }
    Sequence::new(tokens, vocab)
}

fn argmax_lowest(values: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Linear decay of the target temperature per epoch, clamped at `floor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealSchedule {
    pub initial: f64,
    pub rate: f64,
    pub floor: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            initial: 1.0,
            rate: 0.02,
            floor: 0.05,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.floor > 0.0
            && self.floor.is_finite()
            && self.initial >= self.floor
            && self.initial.is_finite()
            && self.rate >= 0.0
            && self.rate.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!("invalid anneal schedule {self:?}")))
        }
    }
}

pub fn anneal_temperature(epoch: usize, sched: &AnnealSchedule) -> f64 {
    (sched.initial - sched.rate * epoch as f64).max(sched.floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Mh,
    DegGibbs,
}

/// Which post-burn-in states a chain keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collect {
    #[default]
    EpochEnd,
    EveryStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub energy: EnergyKind,
    pub length: usize,
    pub proposal: ProposalSettings,
    /// `None` runs single-position steps.
    pub block: Option<BlockPolicy>,
    pub scan: ScanOrder,
    pub warm_start: WarmStart,
    /// Overrides the warm start when set.
    pub initial: Option<Vec<TokenId>>,
    /// Total epochs, burn-in included.
    pub epochs: usize,
    pub burn_in: usize,
    pub target_temp: f64,
    pub anneal: Option<AnnealSchedule>,
    pub force_accept_epochs: usize,
    pub collect: Collect,
    /// Record both energy columns instead of only the target's.
    pub track_both: bool,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, energy: EnergyKind, length: usize) -> Self {
        SamplerConfig {
            kind,
            energy,
            length,
            proposal: ProposalSettings::default(),
            block: None,
            scan: ScanOrder::Random,
            warm_start: WarmStart::Greedy,
            initial: None,
            epochs: 33,
            burn_in: 7,
            target_temp: 1.0,
            anneal: None,
            force_accept_epochs: 0,
            collect: Collect::EpochEnd,
            track_both: true,
        }
    }

    pub fn validate(&self, max_length: usize) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.length == 0 {
            return bad("length must be at least 1".into());
        }
        if self.length > max_length {
            return bad(format!("length {} exceeds model maximum {max_length}", self.length));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.burn_in >= self.epochs {
            return bad(format!("burn_in {} must be below epochs {}", self.burn_in, self.epochs));
        }
        if !(self.target_temp.is_finite() && self.target_temp > 0.0) {
            return bad(format!("target_temp must be positive, got {}", self.target_temp));
        }
        if let Some(a) = &self.anneal {
            a.validate()?;
        }
        match self.block {
            Some(BlockPolicy::Fixed { size: 0 }) => return bad("block size must be at least 1".into()),
            Some(BlockPolicy::Annealed { initial_fraction }) if !(0.0..=1.0).contains(&initial_fraction) => {
                return bad(format!("initial_fraction must lie in [0, 1], got {initial_fraction}"))
            }
            _ => {}
        }
        if let Some(init) = &self.initial {
            if init.len() != self.length {
                return bad(format!("initial sequence has length {}, expected {}", init.len(), self.length));
            }
        }
        self.proposal.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult {
    pub final_state: Sequence,
    pub samples: Vec<Sequence>,
    pub trace: Trace,
}

/// Runs one chain: warm start, then `epochs` sweeps of the configured step.
pub fn run_chain<S: Scorer + ?Sized>(
    model: &S,
    config: &SamplerConfig,
    mut rng: ChaCha8Rng,
) -> Result<ChainResult> {
    config.validate(model.max_length())?;
    let len = config.length;
    let start = match &config.initial {
        Some(tokens) => Sequence::new(tokens.clone(), model.vocab())?,
        None => warm_start(model, len, config.warm_start, &mut rng)?,
    };
    let mut state = ChainState::new(model, config.energy, start, rng)?;
    let mut trace = Trace::new(0);
    let mut samples = Vec::new();

    for epoch in 0..config.epochs {
        state.epoch = epoch;
        state.target_temp = match &config.anneal {
            Some(a) => anneal_temperature(epoch, a),
            None => config.target_temp,
        };
        state.force_accept = epoch < config.force_accept_epochs;
        let burn_in = epoch < config.burn_in;

        let order = position_schedule(len, config.scan, &mut state.rng);
        let block_size = match config.block {
            Some(policy) => block_schedule(epoch, config.epochs, len, policy),
            None => 1,
        };
        for block in order.chunks(block_size) {
            let outcome = match config.kind {
                SamplerKind::Mh => {
                    let prop = propose_block(model, &state.current, block, &config.proposal, &mut state.rng)?;
                    mh_step(model, &mut state, prop)?
                }
                SamplerKind::DegGibbs => {
                    degenerate_block_gibbs_step(model, &mut state, block, &config.proposal)?
                }
            };
            let e = state.energies;
            let keep = |k: EnergyKind| config.track_both || config.energy == k;
            trace.record_step(
                &outcome,
                StepContext {
                    epoch,
                    step: state.step,
                    burn_in,
                    target_temp: state.target_temp,
                    energy_raw: keep(EnergyKind::Raw).then_some(e.raw),
                    energy_norm: keep(EnergyKind::Norm).then_some(e.norm),
                },
            );
            state.step += 1;
            if !burn_in && config.collect == Collect::EveryStep {
                samples.push(state.current.clone());
            }
        }
        if !burn_in && config.collect == Collect::EpochEnd {
            samples.push(state.current.clone());
        }
    }

    Ok(ChainResult {
        final_state: state.current,
        samples,
        trace,
    })
}
