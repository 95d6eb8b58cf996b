//! Sampling from masked-language-model energies.
//!
//! A masked LM scores a sequence position by position. Summing those scores
//! gives an energy over whole sequences, and its masked conditionals make a
//! good proposal distribution for Metropolis-Hastings, even though they are
//! not the exact conditionals of that energy and so cannot be used for
//! Gibbs sampling directly.
//!
//! Modules:
//!
//! * [`seq`]: vocabularies, sequences and masked views;
//! * [`energy`]: the [`Scorer`](energy::Scorer) trait, raw and normalized energies;
//! * [`tabular`]: a seeded lookup-table scorer and its binary file format;
//! * [`proposal`]: temperature, nucleus, single-position and block proposals;
//! * [`sampler`]: the MH chain, degenerate Gibbs, warm start, annealing;
//! * [`trace`]: per-step records and acceptance/novelty rates;
//! * [`oracle`]: exact enumeration, transition kernels, stationarity and
//!   detailed-balance checks.

pub mod energy;
pub mod error;
pub mod oracle;
pub mod proposal;
pub mod sampler;
pub mod seq;
pub mod tabular;
pub mod trace;

pub use energy::{Energies, Energy, EnergyKind, LogitRow, Scorer};
pub use error::{Error, Result};
pub use seq::{apply_mask, MaskedView, Sequence, TokenId, Vocab};
pub use tabular::TabularMlm;
