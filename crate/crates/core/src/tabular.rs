//! A deterministic lookup-table stand-in for a pretrained masked LM.
//!
//! The table holds one [`LogitRow`] per `(position t, context of X_{\t})`
//! pair, i.e. `T * |V|^(T-1)` rows. The context key is the big-endian
//! base-|V| integer formed by the tokens at every position except `t`.
//!
//! Views with more than one masked position have no stored row. For a masked
//! position `t` whose context contains other masked slots, the row is the
//! log of the mean potential over every filling of those other slots:
//! `row_t(w) = ln( |V|^-m * Σ_fill exp(φ_t(w | fill)) )`. Single-mask views
//! read the stored row bit-exactly.
//!
//! # File format
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SQMC"
//! 4       4     version (u32, = 1)
//! 8       8     seed (u64)
//! 16      4     vocab_size (u32)
//! 20      4     length (u32)
//! 24      8     scale (f64)
//! 32      ...   logits, row-major f64, position-major then context key
//! ```
//!
//! All fields are little-endian.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::energy::{log_sum_exp, LogitRow, Scorer};
use crate::error::{Error, Result};
use crate::seq::{MaskedView, TokenId, Vocab};

pub const MAGIC: &[u8; 4] = b"SQMC";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;
/// Default cap on `T * |V|^(T-1)` table rows.
pub const DEFAULT_ROW_CAP: u128 = 10_000_000;
pub const DEFAULT_SCALE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMlm {
    vocab: Vocab,
    length: usize,
    seed: u64,
    scale: f64,
    /// `length * rows_per_position * |V|` logits.
    logits: Vec<f64>,
}

/// `T * |V|^(T-1)`, or `None` if it does not fit in a u128.
fn row_count(vocab_size: u32, length: usize) -> Option<u128> {
    let exp = u32::try_from(length.checked_sub(1)?).ok()?;
    (vocab_size as u128).checked_pow(exp)?.checked_mul(length as u128)
}

fn checked_rows(vocab_size: u32, length: usize, cap: u128) -> Result<usize> {
    if length == 0 {
        return Err(Error::EmptySequence);
    }
    let rows = row_count(vocab_size, length).unwrap_or(u128::MAX);
    if rows > cap {
        return Err(Error::StateSpaceTooLarge { size: rows, cap });
    }
    usize::try_from(rows).map_err(|_| Error::StateSpaceTooLarge { size: rows, cap })
}

impl TabularMlm {
    /// Fills every row with pseudo-random logits in `[-scale, scale)`.
    ///
    /// Values come from a ChaCha8 stream keyed by `seed`, with the position
    /// as stream id and the context key selecting the word offset, so each
    /// row depends only on `(seed, position, context)`.
    pub fn generate(seed: u64, vocab_size: u32, length: usize, scale: f64) -> Result<Self> {
        Self::generate_with_cap(seed, vocab_size, length, scale, DEFAULT_ROW_CAP)
    }

    pub fn generate_with_cap(
        seed: u64,
        vocab_size: u32,
        length: usize,
        scale: f64,
        cap: u128,
    ) -> Result<Self> {
        let vocab = Vocab::new(vocab_size)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::ConfigInvalid(format!("scale must be positive, got {scale}")));
        }
        let rows = checked_rows(vocab_size, length, cap)?;
        let per_pos = rows / length;
        let v = vocab.len();
        let mut logits = Vec::with_capacity(rows * v);
        for t in 0..length {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            for _ in 0..per_pos * v {
                let u: f64 = rng.gen();
                logits.push(scale * (2.0 * u - 1.0));
            }
        }
        Ok(TabularMlm {
            vocab,
            length,
            seed,
            scale,
            logits,
        })
    }

    /// The all-zero model: every conditional is uniform.
    pub fn zeros(vocab_size: u32, length: usize) -> Result<Self> {
        Self::from_fn(vocab_size, length, |_, _| vec![0.0; vocab_size as usize])
    }

    /// Builds a table by calling `f(t, tokens)` for every row, where `tokens`
    /// is the full string with the mask id at `t`.
    pub fn from_fn<F>(vocab_size: u32, length: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &[TokenId]) -> Vec<f64>,
    {
        let vocab = Vocab::new(vocab_size)?;
        let rows = checked_rows(vocab_size, length, DEFAULT_ROW_CAP)?;
        let per_pos = rows / length;
        let v = vocab.len();
        let mut logits = Vec::with_capacity(rows * v);
        let mut tokens = vec![0 as TokenId; length];
        for t in 0..length {
            for ctx in 0..per_pos {
                decode_context(ctx, t, vocab, &mut tokens);
                let row = f(t, &tokens);
                if row.len() != v {
                    return Err(Error::ConfigInvalid(format!(
                        "row for position {t} has {} entries, expected {v}",
                        row.len()
                    )));
                }
                LogitRow::new(row.clone())?;
                logits.extend(row);
            }
        }
        let scale = logits.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(TabularMlm {
            vocab,
            length,
            seed: 0,
            scale: if scale > 0.0 { scale } else { 1.0 },
            logits,
        })
    }

    /// Applies `f` to every stored row.
    pub fn map_rows<F>(&self, f: F) -> TabularMlm
    where
        F: FnMut(&[f64]) -> Vec<f64>,
    {
        let v = self.vocab.len();
        let logits = self.logits.chunks(v).flat_map(f).collect();
        TabularMlm {
            logits,
            ..self.clone()
        }
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rows_per_position(&self) -> usize {
        self.logits.len() / (self.length * self.vocab.len())
    }

    pub fn row_count(&self) -> usize {
        self.logits.len() / self.vocab.len()
    }

    /// Base-|V| key of `tokens` with position `t` skipped.
    pub fn context_key(&self, tokens: &[TokenId], t: usize) -> usize {
        let v = self.vocab.len();
        tokens
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != t)
            .fold(0usize, |acc, (_, &tok)| acc * v + tok as usize)
    }

    /// The stored row for position `t` under context key `ctx`.
    pub fn row(&self, t: usize, ctx: usize) -> &[f64] {
        let v = self.vocab.len();
        let start = (t * self.rows_per_position() + ctx) * v;
        &self.logits[start..start + v]
    }

    fn row_for_view(&self, view: &MaskedView<'_>, t: usize) -> Vec<f64> {
        let others: Vec<usize> = view.masked().iter().copied().filter(|&p| p != t).collect();
        let mut tokens: Vec<TokenId> = view.base().tokens().to_vec();
        if others.is_empty() {
            return self.row(t, self.context_key(&tokens, t)).to_vec();
        }
        let v = self.vocab.len();
        let fills = v.pow(others.len() as u32);
        // per-token accumulation of log potentials across fillings
        let mut per_token: Vec<Vec<f64>> = vec![Vec::with_capacity(fills); v];
        for fill in 0..fills {
            let mut rem = fill;
            for &p in others.iter().rev() {
                tokens[p] = (rem % v) as TokenId;
                rem /= v;
            }
            let row = self.row(t, self.context_key(&tokens, t));
            for (acc, &x) in per_token.iter_mut().zip(row) {
                acc.push(x);
            }
        }
        let log_n = (fills as f64).ln();
        per_token.iter().map(|xs| log_sum_exp(xs) - log_n).collect()
    }

    /// Serializes to the versioned binary format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.logits.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.vocab.size().to_le_bytes());
        out.extend_from_slice(&(self.length as u32).to_le_bytes());
        out.extend_from_slice(&self.scale.to_le_bytes());
        for x in &self.logits {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_bytes_with_cap(bytes, DEFAULT_ROW_CAP)
    }

    /// Parses the binary format, refusing tables with more than `cap` rows
    /// before allocating.
    pub fn from_bytes_with_cap(bytes: &[u8], cap: u128) -> Result<Self> {
        let bad = |m: &str| Error::ModelFormat(m.to_string());
        if bytes.len() < HEADER_LEN {
            return Err(bad("truncated header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let seed = u64_at(8);
        let vocab = Vocab::new(u32_at(16))?;
        let length = u32_at(20) as usize;
        let scale = f64::from_bits(u64_at(24));
        if !(scale.is_finite() && scale > 0.0) {
            return Err(bad("scale must be positive and finite"));
        }
        let rows = checked_rows(vocab.size(), length, cap)?;
        let expected = rows
            .checked_mul(vocab.len())
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| bad("table size overflows"))?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != expected {
            return Err(Error::ModelFormat(format!(
                "body has {} bytes, expected {expected}",
                body.len()
            )));
        }
        let logits: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(bad("non-finite logit"));
        }
        Ok(TabularMlm {
            vocab,
            length,
            seed,
            scale,
            logits,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes the tokens encoded by context key `ctx` into every slot but `t`,
/// and the mask id into `t`.
fn decode_context(mut ctx: usize, t: usize, vocab: Vocab, tokens: &mut [TokenId]) {
    let v = vocab.len();
    for i in (0..tokens.len()).rev() {
        if i == t {
            tokens[i] = vocab.mask_id();
            continue;
        }
        tokens[i] = (ctx % v) as TokenId;
        ctx /= v;
    }
}

impl Scorer for TabularMlm {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn max_length(&self) -> usize {
        self.length
    }

    fn logits(&self, view: &MaskedView<'_>) -> Result<Vec<LogitRow>> {
        if view.len() != self.length {
            return Err(Error::Scorer(format!(
                "tabular model has length {}, view has {}",
                self.length,
                view.len()
            )));
        }
        Ok(view
            .masked()
            .iter()
            .map(|&t| LogitRow::from_trusted(self.row_for_view(view, t)))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq::{apply_mask, Sequence};

    #[test]
    fn table_sizes() {
        let m = TabularMlm::generate(7, 2, 2, 1.0).unwrap();
        assert_eq!(m.row_count(), 4);
        let m = TabularMlm::generate(7, 3, 3, 1.0).unwrap();
        assert_eq!(m.row_count(), 27);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = TabularMlm::generate(7, 3, 3, 1.0).unwrap();
        let b = TabularMlm::generate(7, 3, 3, 1.0).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = TabularMlm::generate(8, 3, 3, 1.0).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
        assert!(a.logits.iter().all(|x| (-1.0..1.0).contains(x)));
    }

    #[test]
    fn too_large_is_rejected() {
        let err = TabularMlm::generate(7, 10, 12, 1.0).unwrap_err();
        assert_eq!(
            err,
            Error::StateSpaceTooLarge {
                size: 12 * 10u128.pow(11),
                cap: DEFAULT_ROW_CAP
            }
        );
    }

    #[test]
    fn context_key_skips_position() {
        let m = TabularMlm::zeros(3, 3).unwrap();
        assert_eq!(m.context_key(&[2, 1, 0], 1), 2 * 3);
        assert_eq!(m.context_key(&[2, 1, 0], 0), 3);
    }

    #[test]
    fn from_fn_sees_masked_slot() {
        let m = TabularMlm::from_fn(2, 3, |t, toks| {
            assert_eq!(toks[t], 2);
            vec![t as f64, toks.iter().filter(|&&x| x == 1).count() as f64]
        })
        .unwrap();
        let s = Sequence::new(vec![1, 0, 1], m.vocab()).unwrap();
        let rows = m.logits(&apply_mask(&s, &[2]).unwrap()).unwrap();
        assert_eq!(rows[0].values(), &[2.0, 1.0]);
    }

    #[test]
    fn block_rows_average_potentials() {
        let m = TabularMlm::generate(3, 2, 2, 2.0).unwrap();
        let s = Sequence::new(vec![0, 0], m.vocab()).unwrap();
        let rows = m.logits(&apply_mask(&s, &[0, 1]).unwrap()).unwrap();
        // position 0, the other slot takes 0 or 1
        for w in 0..2 {
            let expect = ((m.row(0, 0)[w].exp() + m.row(0, 1)[w].exp()) / 2.0).ln();
            assert!((rows[0].values()[w] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn file_round_trip_and_rejections() {
        let m = TabularMlm::generate(11, 3, 2, 2.0).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"SQMC");
        assert_eq!(bytes.len(), HEADER_LEN + 6 * 3 * 8);
        assert_eq!(TabularMlm::from_bytes(&bytes).unwrap(), m);

        assert!(TabularMlm::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(TabularMlm::from_bytes(&bad), Err(Error::ModelFormat(_))));
        let mut bad = bytes.clone();
        bad[HEADER_LEN..HEADER_LEN + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(TabularMlm::from_bytes(&bad).is_err());
        // huge declared length must fail before allocation
        let mut bad = bytes[..HEADER_LEN].to_vec();
        bad[20..24].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            TabularMlm::from_bytes(&bad),
            Err(Error::StateSpaceTooLarge { .. })
        ));
    }
}
