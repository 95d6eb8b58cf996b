//! Scorer interface and the two sequence energies built on it.
//!
//! A scorer returns, for a masked view, one row of log-potentials per masked
//! position. Two energies are derived from the single-mask rows:
//!
//! * `raw`: the negated sum of the raw logit of each observed token;
//! * `norm`: the negated sum of the log-softmax of each observed token, i.e.
//!   the negated pseudo-log-likelihood.
//!
//! Both come from the same `T` single-mask scorer calls, so [`energies`]
//! computes them together.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq::{apply_mask, MaskedView, Sequence, TokenId, Vocab};

/// Log-potentials over the ordinary vocabulary at one masked position.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRow(Vec<f64>);

impl LogitRow {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Scorer(format!("non-finite logit at token {i}")));
        }
        Ok(LogitRow(values))
    }

    /// Skips the finiteness check; callers guarantee finite values.
    pub(crate) fn from_trusted(values: Vec<f64>) -> Self {
        LogitRow(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, token: TokenId) -> f64 {
        self.0[token as usize]
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A probability vector over the ordinary vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist(Vec<f64>);

impl CategoricalDist {
    /// Wraps `probs`, checking non-negativity and unit mass (within 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidTable("negative or non-finite probability".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidTable(format!("probabilities sum to {total}")));
        }
        Ok(CategoricalDist(probs))
    }

    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        CategoricalDist(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.0[token as usize]
    }

    /// `ln p(token)`; `-inf` for tokens with zero mass.
    pub fn log_prob(&self, token: TokenId) -> f64 {
        self.0[token as usize].ln()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Inverse-CDF draw from one uniform variate.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = i;
            if u < acc {
                return i as TokenId;
            }
        }
        // rounding left `acc` fractionally below 1
        last as TokenId
    }
}

/// Which energy parametrization defines the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyKind {
    Raw,
    Norm,
}

impl std::fmt::Display for EnergyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnergyKind::Raw => "raw",
            EnergyKind::Norm => "norm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Energy {
    pub value: f64,
    pub kind: EnergyKind,
}

/// Both energies of one sequence, computed from the same scorer rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Energies {
    pub raw: f64,
    pub norm: f64,
}

impl Energies {
    pub fn get(&self, kind: EnergyKind) -> f64 {
        match kind {
            EnergyKind::Raw => self.raw,
            EnergyKind::Norm => self.norm,
        }
    }
}

/// A source of masked-position log-potentials.
///
/// Implementations must be pure: the same view always yields the same rows.
pub trait Scorer: Send + Sync {
    fn vocab(&self) -> Vocab;

    fn max_length(&self) -> usize;

    /// One row per position of `view.masked()`, in that order, computed with
    /// every masked position masked simultaneously.
    fn logits(&self, view: &MaskedView<'_>) -> Result<Vec<LogitRow>>;

    /// Evaluates several views. Remote scorers override this to pipeline.
    fn logits_batch(&self, views: &[MaskedView<'_>]) -> Result<Vec<Vec<LogitRow>>> {
        views.iter().map(|v| self.logits(v)).collect()
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn vocab(&self) -> Vocab {
        (**self).vocab()
    }
    fn max_length(&self) -> usize {
        (**self).max_length()
    }
    fn logits(&self, view: &MaskedView<'_>) -> Result<Vec<LogitRow>> {
        (**self).logits(view)
    }
    fn logits_batch(&self, views: &[MaskedView<'_>]) -> Result<Vec<Vec<LogitRow>>> {
        (**self).logits_batch(views)
    }
}

impl<S: Scorer + ?Sized> Scorer for std::sync::Arc<S> {
    fn vocab(&self) -> Vocab {
        (**self).vocab()
    }
    fn max_length(&self) -> usize {
        (**self).max_length()
    }
    fn logits(&self, view: &MaskedView<'_>) -> Result<Vec<LogitRow>> {
        (**self).logits(view)
    }
    fn logits_batch(&self, views: &[MaskedView<'_>]) -> Result<Vec<Vec<LogitRow>>> {
        (**self).logits_batch(views)
    }
}

fn check_rows(view: &MaskedView<'_>, rows: &[LogitRow], vocab: Vocab) -> Result<()> {
    if rows.len() != view.masked().len() {
        return Err(Error::Scorer(format!(
            "expected {} rows, scorer returned {}",
            view.masked().len(),
            rows.len()
        )));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != vocab.len()) {
        return Err(Error::Scorer(format!(
            "row has {} entries, vocabulary has {}",
            r.len(),
            vocab.len()
        )));
    }
    Ok(())
}

fn check_view<S: Scorer + ?Sized>(model: &S, view: &MaskedView<'_>) -> Result<()> {
    if view.masked().is_empty() {
        return Err(Error::NothingMasked);
    }
    if view.len() > model.max_length() {
        return Err(Error::TooLong {
            len: view.len(),
            max: model.max_length(),
        });
    }
    Ok(())
}

/// Rows for every masked position of `view`, paired with their positions.
pub fn positional_logits<S: Scorer + ?Sized>(
    model: &S,
    view: &MaskedView<'_>,
) -> Result<Vec<(usize, LogitRow)>> {
    check_view(model, view)?;
    let rows = model.logits(view)?;
    check_rows(view, &rows, model.vocab())?;
    Ok(view.masked().iter().copied().zip(rows).collect())
}

/// Numerically stable `ln Σ exp(x)`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax with max subtraction.
pub fn softmax(values: &[f64]) -> CategoricalDist {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    CategoricalDist(exps.into_iter().map(|e| e / total).collect())
}

/// The free conditional at `pos`: softmax of its row under `view`.
pub fn mlm_conditional<S: Scorer + ?Sized>(
    model: &S,
    view: &MaskedView<'_>,
    pos: usize,
) -> Result<CategoricalDist> {
    let idx = view
        .masked()
        .iter()
        .position(|&p| p == pos)
        .ok_or(Error::PositionNotMasked(pos))?;
    let mut rows = positional_logits(model, view)?;
    let (_, row) = rows.swap_remove(idx);
    Ok(softmax(row.values()))
}

/// The `T` single-mask rows used for energy evaluation, one per position.
pub fn single_mask_rows<S: Scorer + ?Sized>(model: &S, seq: &Sequence) -> Result<Vec<LogitRow>> {
    if seq.len() > model.max_length() {
        return Err(Error::TooLong {
            len: seq.len(),
            max: model.max_length(),
        });
    }
    let views = (0..seq.len())
        .map(|t| apply_mask(seq, &[t]))
        .collect::<Result<Vec<_>>>()?;
    let batches = model.logits_batch(&views)?;
    if batches.len() != views.len() {
        return Err(Error::Scorer(format!(
            "expected {} row batches, scorer returned {}",
            views.len(),
            batches.len()
        )));
    }
    let vocab = model.vocab();
    let mut out = Vec::with_capacity(seq.len());
    for (view, mut rows) in views.iter().zip(batches) {
        check_rows(view, &rows, vocab)?;
        out.push(rows.pop().expect("one row per single-mask view"));
    }
    Ok(out)
}

/// Raw and normalized energy of `seq` from one pass of single-mask rows.
pub fn energies<S: Scorer + ?Sized>(model: &S, seq: &Sequence) -> Result<Energies> {
    let rows = single_mask_rows(model, seq)?;
    let mut raw = 0.0;
    let mut norm = 0.0;
    for (row, &tok) in rows.iter().zip(seq.tokens()) {
        let logit = row.get(tok);
        raw -= logit;
        norm -= logit - log_sum_exp(row.values());
    }
    Ok(Energies { raw, norm })
}

pub fn energy<S: Scorer + ?Sized>(model: &S, seq: &Sequence, kind: EnergyKind) -> Result<Energy> {
    let e = energies(model, seq)?;
    Ok(Energy {
        value: e.get(kind),
        kind,
    })
}

pub fn energy_raw<S: Scorer + ?Sized>(model: &S, seq: &Sequence) -> Result<Energy> {
    energy(model, seq, EnergyKind::Raw)
}

pub fn energy_norm<S: Scorer + ?Sized>(model: &S, seq: &Sequence) -> Result<Energy> {
    energy(model, seq, EnergyKind::Norm)
}
