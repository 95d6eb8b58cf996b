//! Proposal distributions built from masked conditionals.
//!
//! A proposal masks one position (or a block of positions), reads the
//! conditional at each masked slot, reshapes it with a temperature and then a
//! nucleus cut, and samples replacement tokens independently. The reverse
//! probability of returning to the old tokens is read from the same
//! conditionals: the masked context is identical for the source and the
//! candidate, so no second scorer call is needed.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{positional_logits, softmax, CategoricalDist, LogitRow, Scorer};
use crate::error::{Error, Result};
use crate::seq::{apply_mask, Sequence, TokenId};

/// Entropy controls applied to every masked conditional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalSettings {
    pub temperature: f64,
    pub nucleus: f64,
}

impl Default for ProposalSettings {
    fn default() -> Self {
        ProposalSettings {
            temperature: 1.0,
            nucleus: 1.0,
        }
    }
}

impl ProposalSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::NonPositiveTemperature(self.temperature));
        }
        if !(self.nucleus > 0.0 && self.nucleus <= 1.0) {
            return Err(Error::InvalidBoundary(self.nucleus));
        }
        Ok(())
    }

    /// Temperature first, then the nucleus cut.
    pub fn shape(&self, row: &LogitRow) -> Result<CategoricalDist> {
        let d = temper(row, self.temperature)?;
        if self.nucleus == 1.0 {
            Ok(d)
        } else {
            nucleus_truncate(&d, self.nucleus)
        }
    }
}

/// `softmax(row / temperature)`.
pub fn temper(row: &LogitRow, temperature: f64) -> Result<CategoricalDist> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    if temperature == 1.0 {
        return Ok(softmax(row.values()));
    }
    let scaled: Vec<f64> = row.values().iter().map(|v| v / temperature).collect();
    Ok(softmax(&scaled))
}

/// Keeps the smallest top-probability set with cumulative mass `>= b` and
/// renormalizes. Ties are ordered by ascending token id.
pub fn nucleus_truncate(dist: &CategoricalDist, b: f64) -> Result<CategoricalDist> {
    if !(b > 0.0 && b <= 1.0) {
        return Err(Error::InvalidBoundary(b));
    }
    let probs = dist.probs();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // stable sort keeps ascending ids among equal probabilities
    order.sort_by(|&a, &c| probs[c].total_cmp(&probs[a]));
    let mut keep = order.len();
    let mut acc = 0.0;
    for (n, &i) in order.iter().enumerate() {
        acc += probs[i];
        if acc >= b {
            keep = n + 1;
            break;
        }
    }
    let mut out = vec![0.0; probs.len()];
    let kept = &order[..keep];
    let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
    for &i in kept {
        out[i] = probs[i] / mass;
    }
    Ok(CategoricalDist::from_normalized(out))
}

/// A candidate state together with its forward and reverse proposal log
/// probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub candidate: Sequence,
    /// `ln q(candidate | source)`.
    pub log_q_fwd: f64,
    /// `ln q(source | candidate)`; `-inf` when an old token fell outside the
    /// nucleus.
    pub log_q_rev: f64,
    /// Positions whose token actually changed.
    pub changed: Vec<usize>,
    /// Positions that were masked to build the proposal.
    pub masked: Vec<usize>,
}

impl Proposal {
    pub fn is_self(&self) -> bool {
        self.changed.is_empty()
    }
}

/// Shaped conditionals for each position of `positions`, all read from one
/// view in which every listed position is masked.
pub fn block_conditionals<S: Scorer + ?Sized>(
    model: &S,
    state: &Sequence,
    positions: &[usize],
    settings: &ProposalSettings,
) -> Result<Vec<(usize, CategoricalDist)>> {
    settings.validate()?;
    let view = apply_mask(state, positions)?;
    positional_logits(model, &view)?
        .into_iter()
        .map(|(p, row)| Ok((p, settings.shape(&row)?)))
        .collect()
}

/// Draws tokens for a set of already computed conditionals.
pub fn sample_from_conditionals<R: Rng + ?Sized>(
    state: &Sequence,
    conditionals: &[(usize, CategoricalDist)],
    rng: &mut R,
) -> Proposal {
    let mut tokens: Vec<TokenId> = state.tokens().to_vec();
    let mut log_q_fwd = 0.0;
    let mut log_q_rev = 0.0;
    let mut changed = Vec::new();
    for (p, dist) in conditionals {
        let old = state.get(*p);
        let new = dist.sample(rng);
        log_q_fwd += dist.log_prob(new);
        log_q_rev += dist.log_prob(old);
        if new != old {
            changed.push(*p);
        }
        tokens[*p] = new;
    }
    Proposal {
        candidate: Sequence::new(tokens, state.vocab()).expect("sampled tokens are ordinary"),
        log_q_fwd,
        log_q_rev,
        changed,
        masked: conditionals.iter().map(|(p, _)| *p).collect(),
    }
}

/// Masks `pos`, samples a replacement from the shaped conditional.
pub fn propose_single<S: Scorer + ?Sized, R: Rng + ?Sized>(
    model: &S,
    state: &Sequence,
    pos: usize,
    settings: &ProposalSettings,
    rng: &mut R,
) -> Result<Proposal> {
    propose_block(model, state, &[pos], settings, rng)
}

/// Masks every position of `positions` at once and resamples each
/// independently from the jointly masked context.
pub fn propose_block<S: Scorer + ?Sized, R: Rng + ?Sized>(
    model: &S,
    state: &Sequence,
    positions: &[usize],
    settings: &ProposalSettings,
    rng: &mut R,
) -> Result<Proposal> {
    if positions.is_empty() {
        return Err(Error::NothingMasked);
    }
    let conditionals = block_conditionals(model, state, positions, settings)?;
    Ok(sample_from_conditionals(state, &conditionals, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanOrder {
    LeftToRight,
    #[default]
    Random,
}

/// A permutation of `0..len`.
pub fn position_schedule<R: Rng + ?Sized>(len: usize, mode: ScanOrder, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if mode == ScanOrder::Random {
        order.shuffle(rng);
    }
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum BlockPolicy {
    Fixed { size: usize },
    /// Linear decay from `initial_fraction * T` down to a floor of one.
    Annealed { initial_fraction: f64 },
}

impl Default for BlockPolicy {
    fn default() -> Self {
        BlockPolicy::Annealed {
            initial_fraction: 0.5,
        }
    }
}

/// Block size for `epoch` of `total_epochs`; always in `[1, len]`.
pub fn block_schedule(epoch: usize, total_epochs: usize, len: usize, policy: BlockPolicy) -> usize {
    let size = match policy {
        BlockPolicy::Fixed { size } => size.min(len),
        BlockPolicy::Annealed { initial_fraction } => {
            let remaining = 1.0 - epoch as f64 / total_epochs.max(1) as f64;
            (initial_fraction * len as f64 * remaining).round().max(1.0) as usize
        }
    };
    size.clamp(1, len.max(1))
}
