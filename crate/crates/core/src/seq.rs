//! Tokens, vocabularies and fixed-length sequences.
//!
//! The mask sentinel is the single id `vocab.size`, one past the last
//! ordinary token. Positions are 0-based throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// An ordinary-token vocabulary plus its reserved mask id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    size: u32,
}

impl Vocab {
    pub fn new(size: u32) -> Result<Self> {
        if size < 2 {
            return Err(Error::VocabTooSmall(size));
        }
        Ok(Vocab { size })
    }

    #[inline]
    pub fn size(&self) -> u32 {
        self.size
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.size as usize
    }

    /// Vocabularies are never empty; present for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn mask_id(&self) -> TokenId {
        self.size
    }

    /// Number of distinct sequences of length `len`, or `None` on overflow.
    pub fn state_count(&self, len: usize) -> Option<usize> {
        let exp = u32::try_from(len).ok()?;
        (self.size as usize).checked_pow(exp)
    }
}

/// A finalized token string: every id lies in `[0, vocab.size)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sequence {
    tokens: Vec<TokenId>,
    vocab: Vocab,
}

impl Sequence {
    pub fn new(tokens: Vec<TokenId>, vocab: Vocab) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if let Some((position, &id)) = tokens.iter().enumerate().find(|(_, &id)| id >= vocab.size) {
            return Err(Error::TokenOutOfRange { position, id });
        }
        Ok(Sequence { tokens, vocab })
    }

    #[inline]
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Always false; sequences are validated non-empty.
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    #[inline]
    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    #[inline]
    pub fn get(&self, pos: usize) -> TokenId {
        self.tokens[pos]
    }

    /// Copy of `self` with `pos` set to `token`.
    ///
    /// Panics if `pos` is out of range or `token` is not an ordinary token.
    pub fn with_token(&self, pos: usize, token: TokenId) -> Sequence {
        assert!(token < self.vocab.size, "token {token} outside vocabulary");
        let mut tokens = self.tokens.clone();
        tokens[pos] = token;
        Sequence {
            tokens,
            vocab: self.vocab,
        }
    }

    /// Big-endian base-|V| index of this sequence (position 0 most significant).
    pub fn state_index(&self) -> usize {
        let v = self.vocab.len();
        self.tokens.iter().fold(0usize, |acc, &t| acc * v + t as usize)
    }

    /// Inverse of [`Sequence::state_index`].
    pub fn from_state_index(mut index: usize, len: usize, vocab: Vocab) -> Sequence {
        let v = vocab.len();
        let mut tokens = vec![0; len];
        for slot in tokens.iter_mut().rev() {
            *slot = (index % v) as TokenId;
            index /= v;
        }
        Sequence { tokens, vocab }
    }

    /// Positions at which `self` and `other` differ.
    pub fn diff_positions(&self, other: &Sequence) -> Vec<usize> {
        self.tokens
            .iter()
            .zip(&other.tokens)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect()
    }
}

/// A read-only view of a sequence with some positions replaced by the mask id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedView<'a> {
    base: &'a Sequence,
    masked: Vec<usize>,
}

/// Masks `positions` of `seq`. Duplicates are collapsed; the result is sorted.
pub fn apply_mask<'a>(seq: &'a Sequence, positions: &[usize]) -> Result<MaskedView<'a>> {
    let len = seq.len();
    if let Some(&position) = positions.iter().find(|&&p| p >= len) {
        return Err(Error::PositionOutOfRange { position, len });
    }
    let mut masked = positions.to_vec();
    masked.sort_unstable();
    masked.dedup();
    Ok(MaskedView { base: seq, masked })
}

impl<'a> MaskedView<'a> {
    pub fn base(&self) -> &'a Sequence {
        self.base
    }

    /// Masked positions in ascending order.
    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.masked.binary_search(&pos).is_ok()
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn vocab(&self) -> Vocab {
        self.base.vocab
    }

    /// Token as seen through the view.
    pub fn read(&self, pos: usize) -> TokenId {
        if self.is_masked(pos) {
            self.base.vocab.mask_id()
        } else {
            self.base.tokens[pos]
        }
    }

    /// The full token string as seen through the view.
    pub fn tokens(&self) -> Vec<TokenId> {
        (0..self.len()).map(|p| self.read(p)).collect()
    }
}
