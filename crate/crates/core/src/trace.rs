//! Per-step records and running acceptance/novelty aggregates.

use serde::{Deserialize, Serialize};

use crate::energy::EnergyKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub accepted: bool,
    /// Accepted and different from the previous state.
    pub novel: bool,
    pub acceptance_prob: f64,
    pub energy_old: f64,
    pub energy_new: f64,
    pub log_q_fwd: f64,
    pub log_q_rev: f64,
}

/// Where a step happened and the chain's energies after it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    pub epoch: usize,
    pub step: usize,
    pub burn_in: bool,
    pub target_temp: f64,
    pub energy_raw: Option<f64>,
    pub energy_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub chain_id: usize,
    pub epoch: usize,
    pub step: usize,
    pub burn_in: bool,
    pub accepted: bool,
    pub novel: bool,
    pub acceptance_prob: f64,
    pub energy_raw: Option<f64>,
    pub energy_norm: Option<f64>,
    pub target_temp: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Counters {
    steps: usize,
    accepted: usize,
    novel: usize,
}

/// Ordered step records of one chain.
///
/// Rates are computed over post-burn-in steps unless `include_burn_in` is
/// set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    chain_id: usize,
    include_burn_in: bool,
    records: Vec<TraceRecord>,
    window: Counters,
}

impl Trace {
    pub fn new(chain_id: usize) -> Self {
        Trace {
            chain_id,
            include_burn_in: false,
            records: Vec::new(),
            window: Counters::default(),
        }
    }

    /// Count burn-in steps in the rates as well.
    pub fn including_burn_in(mut self) -> Self {
        self.include_burn_in = true;
        self.recount();
        self
    }

    pub fn chain_id(&self) -> usize {
        self.chain_id
    }

    pub fn set_chain_id(&mut self, id: usize) {
        self.chain_id = id;
        for r in &mut self.records {
            r.chain_id = id;
        }
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn counts(&self, r: &TraceRecord) -> bool {
        self.include_burn_in || !r.burn_in
    }

    fn bump(&mut self, idx: usize) {
        let r = &self.records[idx];
        if self.counts(r) {
            self.window.steps += 1;
            self.window.accepted += r.accepted as usize;
            self.window.novel += (r.accepted && r.novel) as usize;
        }
    }

    fn recount(&mut self) {
        self.window = Counters::default();
        for i in 0..self.records.len() {
            self.bump(i);
        }
    }

    pub fn record_step(&mut self, outcome: &StepOutcome, ctx: StepContext) {
        self.push(TraceRecord {
            chain_id: self.chain_id,
            epoch: ctx.epoch,
            step: ctx.step,
            burn_in: ctx.burn_in,
            accepted: outcome.accepted,
            novel: outcome.accepted && outcome.novel,
            acceptance_prob: outcome.acceptance_prob,
            energy_raw: ctx.energy_raw,
            energy_norm: ctx.energy_norm,
            target_temp: ctx.target_temp,
        });
    }

    /// Appends an existing record, e.g. one read back from an export.
    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
        self.bump(self.records.len() - 1);
    }

    pub fn from_records(chain_id: usize, records: impl IntoIterator<Item = TraceRecord>) -> Self {
        let mut t = Trace::new(chain_id);
        for r in records {
            t.push(r);
        }
        t
    }

    /// Steps counted by the rates.
    pub fn counted_steps(&self) -> usize {
        self.window.steps
    }

    pub fn acceptance_rate(&self) -> f64 {
        ratio(self.window.accepted, self.window.steps)
    }

    pub fn novel_rate(&self) -> f64 {
        ratio(self.window.novel, self.window.steps)
    }

    /// Mean of the chosen energy column per epoch, for every epoch present.
    /// Epochs whose column is empty map to `None`.
    pub fn epoch_mean_energies(&self, kind: EnergyKind) -> Vec<(usize, Option<f64>)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.records {
            let value = match kind {
                EnergyKind::Raw => r.energy_raw,
                EnergyKind::Norm => r.energy_norm,
            };
            if out.last().map(|l| l.0) != Some(r.epoch) {
                out.push((r.epoch, 0.0, 0));
            }
            if let Some(v) = value {
                let last = out.last_mut().unwrap();
                last.1 += v;
                last.2 += 1;
            }
        }
        out.into_iter()
            .map(|(e, sum, n)| (e, (n > 0).then(|| sum / n as f64)))
            .collect()
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}
