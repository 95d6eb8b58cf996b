//! Brute-force machinery for state spaces small enough to enumerate.
//!
//! States are indexed big-endian in base |V| (position 0 most significant),
//! matching [`Sequence::state_index`]. Kernels are stored sparsely by row
//! since single-position chains touch only `T(|V|-1) + 1` states per row.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{energies, log_sum_exp, mlm_conditional, CategoricalDist, Energies, EnergyKind, Scorer};
use crate::error::{Error, Result};
use crate::proposal::{block_conditionals, ProposalSettings};
use crate::sampler::{log_acceptance, SamplerKind};
use crate::seq::{apply_mask, Sequence, TokenId};
use crate::tabular::TabularMlm;

/// Largest state space the oracle will enumerate.
pub const DEFAULT_STATE_CAP: usize = 100_000;
pub const POWER_ITERATION_TOL: f64 = 1e-12;
pub const POWER_ITERATION_MAX: usize = 1_000_000;

fn state_count<S: Scorer + ?Sized>(model: &S, length: usize) -> Result<usize> {
    let cap = DEFAULT_STATE_CAP;
    match model.vocab().state_count(length) {
        Some(n) if n <= cap => Ok(n),
        Some(n) => Err(Error::StateSpaceTooLarge { size: n as u128, cap: cap as u128 }),
        None => Err(Error::StateSpaceTooLarge { size: u128::MAX, cap: cap as u128 }),
    }
}

/// Energies of every sequence of `length`, indexed by state.
pub fn all_energies<S: Scorer + ?Sized>(model: &S, length: usize) -> Result<Vec<Energies>> {
    let n = state_count(model, length)?;
    let vocab = model.vocab();
    (0..n)
        .into_par_iter()
        .map(|i| energies(model, &Sequence::from_state_index(i, length, vocab)))
        .collect()
}

/// Normalized `exp(-E / temp)` over every state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactDistribution {
    pub probs: Vec<f64>,
    pub log_z: f64,
}

impl ExactDistribution {
    pub fn from_energies(energy: &[f64], target_temp: f64) -> Self {
        let logits: Vec<f64> = energy.iter().map(|e| -e / target_temp).collect();
        let log_z = log_sum_exp(&logits);
        ExactDistribution {
            probs: logits.iter().map(|l| (l - log_z).exp()).collect(),
            log_z,
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        write_distribution_csv(w, &self.probs)
    }
}

/// Writes `index,value` rows.
pub fn write_distribution_csv<W: Write>(mut w: W, probs: &[f64]) -> std::io::Result<()> {
    writeln!(w, "index,value")?;
    for (i, p) in probs.iter().enumerate() {
        writeln!(w, "{i},{p:e}")?;
    }
    Ok(())
}

pub fn enumerate_target<S: Scorer + ?Sized>(
    model: &S,
    length: usize,
    kind: EnergyKind,
    target_temp: f64,
) -> Result<ExactDistribution> {
    if !(target_temp.is_finite() && target_temp > 0.0) {
        return Err(Error::NonPositiveTemperature(target_temp));
    }
    let e: Vec<f64> = all_energies(model, length)?.iter().map(|e| e.get(kind)).collect();
    Ok(ExactDistribution::from_energies(&e, target_temp))
}

/// Conditional of position `pos` under the raw-energy joint, from `|V|`
/// full energy evaluations.
pub fn exact_raw_conditional<S: Scorer + ?Sized>(
    model: &S,
    seq: &Sequence,
    pos: usize,
) -> Result<CategoricalDist> {
    state_count(model, seq.len())?;
    if pos >= seq.len() {
        return Err(Error::PositionOutOfRange { position: pos, len: seq.len() });
    }
    let logits = (0..model.vocab().size())
        .map(|w| Ok(-energies(model, &seq.with_token(pos, w))?.raw))
        .collect::<Result<Vec<f64>>>()?;
    Ok(crate::energy::softmax(&logits))
}

/// Conditional of `pos` given the rest of `seq`, read off an enumerated joint.
pub fn joint_conditional(joint: &ExactDistribution, seq: &Sequence, pos: usize) -> CategoricalDist {
    let weights: Vec<f64> = (0..seq.vocab().size())
        .map(|w| joint.probs[seq.with_token(pos, w).state_index()])
        .collect();
    let total: f64 = weights.iter().sum();
    CategoricalDist::new(weights.iter().map(|x| x / total).collect()).expect("normalized")
}

/// Total variation between the free conditional and the exact raw-energy
/// conditional at `(seq, pos)`.
pub fn mismatch_pmlm_vs_raw<S: Scorer + ?Sized>(model: &S, seq: &Sequence, pos: usize) -> Result<f64> {
    let exact = exact_raw_conditional(model, seq, pos)?;
    let free = mlm_conditional(model, &apply_mask(seq, &[pos])?, pos)?;
    total_variation(free.probs(), exact.probs())
}

pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch { left: p.len(), right: q.len() });
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// The sampler a kernel encodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub energy: EnergyKind,
    pub target_temp: f64,
    /// Positions resampled per step; each step picks a uniformly random
    /// subset of this size.
    pub block_size: usize,
}

impl SamplerSpec {
    pub fn mh(energy: EnergyKind) -> Self {
        SamplerSpec {
            kind: SamplerKind::Mh,
            energy,
            target_temp: 1.0,
            block_size: 1,
        }
    }

    pub fn deg_gibbs() -> Self {
        SamplerSpec {
            kind: SamplerKind::DegGibbs,
            energy: EnergyKind::Raw,
            target_temp: 1.0,
            block_size: 1,
        }
    }

    pub fn with_block(mut self, size: usize) -> Self {
        self.block_size = size;
        self
    }
}

/// A row-stochastic matrix in compressed sparse row form.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    pub spec: Option<SamplerSpec>,
}

impl Kernel {
    /// Builds from per-row `(column, value)` lists; columns must be sorted
    /// and unique within a row.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Kernel { n, row_ptr, cols, vals, spec: None }
    }

    pub fn from_dense(matrix: &[Vec<f64>]) -> Self {
        Kernel::from_rows(
            matrix
                .iter()
                .map(|r| r.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect())
                .collect(),
        )
    }

    pub fn states(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| {
                let mut r = vec![0.0; self.n];
                let (cols, vals) = self.row(i);
                for (c, v) in cols.iter().zip(vals) {
                    r[*c] = *v;
                }
                r
            })
            .collect()
    }

    /// Largest deviation of a row sum from 1, and whether any entry is
    /// negative.
    pub fn stochasticity_error(&self) -> (f64, bool) {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            let s: f64 = self.row(i).1.iter().sum();
            worst = worst.max((s - 1.0).abs());
        }
        (worst, self.vals.iter().any(|v| *v < 0.0))
    }

    /// `pi K`.
    pub fn apply_left(&self, pi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (i, &p) in pi.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                out[*c] += p * v;
            }
        }
        out
    }

    /// Writes `row,col,value` for every stored entry.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "row,col,value")?;
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                writeln!(w, "{i},{c},{v:e}")?;
            }
        }
        Ok(())
    }
}

/// All `k`-subsets of `0..n` in lexicographic order.
fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Exact transition matrix of a random-scan sampler: each step picks a
/// uniformly random `block_size`-subset of positions, resamples it from the
/// shaped, jointly masked conditionals and, for MH, accepts or rejects.
/// Rejected mass sits on the diagonal.
pub fn transition_kernel<S: Scorer + ?Sized>(
    model: &S,
    length: usize,
    spec: SamplerSpec,
    settings: &ProposalSettings,
) -> Result<Kernel> {
    settings.validate()?;
    if spec.block_size == 0 || spec.block_size > length {
        return Err(Error::ConfigInvalid(format!(
            "block size {} outside [1, {length}]",
            spec.block_size
        )));
    }
    if !(spec.target_temp.is_finite() && spec.target_temp > 0.0) {
        return Err(Error::NonPositiveTemperature(spec.target_temp));
    }
    let n = state_count(model, length)?;
    let vocab = model.vocab();
    let energy: Vec<f64> = match spec.kind {
        SamplerKind::Mh => all_energies(model, length)?.iter().map(|e| e.get(spec.energy)).collect(),
        SamplerKind::DegGibbs => Vec::new(),
    };
    let blocks = subsets(length, spec.block_size);
    let weight = 1.0 / blocks.len() as f64;
    let v = vocab.len();

    let rows = (0..n)
        .into_par_iter()
        .map(|x| -> Result<Vec<(usize, f64)>> {
            let seq = Sequence::from_state_index(x, length, vocab);
            let mut row: BTreeMap<usize, f64> = BTreeMap::new();
            for block in &blocks {
                let conds = block_conditionals(model, &seq, block, settings)?;
                let q_rev: f64 = conds.iter().map(|(p, d)| d.prob(seq.get(*p))).product();
                let mut tokens: Vec<TokenId> = seq.tokens().to_vec();
                for assignment in 0..v.pow(block.len() as u32) {
                    let mut rem = assignment;
                    let mut q_fwd = 1.0;
                    for (p, d) in conds.iter().rev() {
                        let tok = (rem % v) as TokenId;
                        rem /= v;
                        tokens[*p] = tok;
                        q_fwd *= d.prob(tok);
                    }
                    if q_fwd == 0.0 {
                        continue;
                    }
                    let y = Sequence::new(tokens.clone(), vocab)?.state_index();
                    let mass = weight * q_fwd;
                    match spec.kind {
                        SamplerKind::DegGibbs => *row.entry(y).or_default() += mass,
                        SamplerKind::Mh => {
                            let a = if y == x {
                                1.0
                            } else {
                                log_acceptance(energy[x], energy[y], spec.target_temp, q_fwd.ln(), q_rev.ln()).exp()
                            };
                            *row.entry(y).or_default() += mass * a;
                            if a < 1.0 {
                                *row.entry(x).or_default() += mass * (1.0 - a);
                            }
                        }
                    }
                }
            }
            Ok(row.into_iter().filter(|(_, p)| *p != 0.0).collect())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut k = Kernel::from_rows(rows);
    k.spec = Some(spec);
    Ok(k)
}

/// Strongly connected components of the kernel's transition graph, each
/// sorted, listed in order of their smallest state.
pub fn communicating_classes(kernel: &Kernel) -> Vec<Vec<usize>> {
    let n = kernel.states();
    // Kosaraju: finish order on K, then sweep the transpose.
    let mut transpose: Vec<Vec<usize>> = vec![Vec::new(); n];
    for x in 0..n {
        for &y in kernel.row(x).0 {
            transpose[y].push(x);
        }
    }
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for root in 0..n {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        let mut stack = vec![(root, 0usize)];
        while let Some((x, i)) = stack.pop() {
            let cols = kernel.row(x).0;
            if i < cols.len() {
                stack.push((x, i + 1));
                let y = cols[i];
                if !seen[y] {
                    seen[y] = true;
                    stack.push((y, 0));
                }
            } else {
                order.push(x);
            }
        }
    }
    let mut comp = vec![usize::MAX; n];
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for &root in order.iter().rev() {
        if comp[root] != usize::MAX {
            continue;
        }
        let id = classes.len();
        let mut members = vec![root];
        comp[root] = id;
        let mut stack = vec![root];
        while let Some(x) = stack.pop() {
            for &y in &transpose[x] {
                if comp[y] == usize::MAX {
                    comp[y] = id;
                    members.push(y);
                    stack.push(y);
                }
            }
        }
        members.sort_unstable();
        classes.push(members);
    }
    classes.sort_by_key(|c| c[0]);
    classes
}

/// Largest TV between `pi` and `target`, each restricted to one class and
/// renormalized. Zero when `pi` agrees with `target` up to the weight it
/// gives each class.
pub fn within_class_tv(classes: &[Vec<usize>], pi: &[f64], target: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for class in classes {
        let zp: f64 = class.iter().map(|&i| pi[i]).sum();
        let zt: f64 = class.iter().map(|&i| target[i]).sum();
        if zp == 0.0 || zt == 0.0 {
            continue;
        }
        let tv: f64 = 0.5 * class.iter().map(|&i| (pi[i] / zp - target[i] / zt).abs()).sum::<f64>();
        worst = worst.max(tv);
    }
    worst
}

/// Fixed point of `pi <- pi K` by power iteration from the uniform vector.
pub fn stationary_distribution(kernel: &Kernel) -> Result<Vec<f64>> {
    stationary_distribution_with(kernel, POWER_ITERATION_TOL, POWER_ITERATION_MAX)
}

pub fn stationary_distribution_with(kernel: &Kernel, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = kernel.states();
    let mut pi = vec![1.0 / n as f64; n];
    let mut delta = f64::INFINITY;
    for _ in 0..max_iter {
        let mut next = kernel.apply_left(&pi);
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|p| *p /= total);
        delta = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if delta < tol {
            return Ok(pi);
        }
    }
    Err(Error::NoConvergence { iterations: max_iter, delta })
}

/// `max |pi_x K_xy - pi_y K_yx|` over all state pairs.
pub fn detailed_balance_residual(kernel: &Kernel, target: &[f64]) -> Result<f64> {
    if kernel.states() != target.len() {
        return Err(Error::ShapeMismatch {
            kernel: kernel.states(),
            target: target.len(),
        });
    }
    let mut worst = 0.0f64;
    for x in 0..kernel.states() {
        let (cols, vals) = kernel.row(x);
        for (&y, &kxy) in cols.iter().zip(vals) {
            let r = (target[x] * kxy - target[y] * kernel.get(y, x)).abs();
            worst = worst.max(r);
        }
    }
    Ok(worst)
}

/// Stationarity and reversibility of one sampler against its target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub states: usize,
    pub stationary_tv: f64,
    pub detailed_balance_residual: f64,
    /// Communicating classes of the kernel; more than one means the chain
    /// is reducible and its stationary vector depends on the start.
    pub classes: usize,
    pub within_class_tv: f64,
}

pub fn check_sampler<S: Scorer + ?Sized>(
    model: &S,
    length: usize,
    spec: SamplerSpec,
    settings: &ProposalSettings,
) -> Result<OracleCheck> {
    let target = enumerate_target(model, length, spec.energy, spec.target_temp)?;
    let kernel = transition_kernel(model, length, spec, settings)?;
    let pi = stationary_distribution(&kernel)?;
    let classes = communicating_classes(&kernel);
    Ok(OracleCheck {
        states: target.len(),
        stationary_tv: total_variation(&pi, &target.probs)?,
        detailed_balance_residual: detailed_balance_residual(&kernel, &target.probs)?,
        classes: classes.len(),
        within_class_tv: within_class_tv(&classes, &pi, &target.probs),
    })
}

/// A tabular model whose free conditionals are exactly the conditionals of
/// `joint`, so that Gibbs sampling from them is exact.
pub fn consistent_model(joint: &ExactDistribution, vocab_size: u32, length: usize) -> Result<TabularMlm> {
    let v = vocab_size as usize;
    if v.checked_pow(length as u32) != Some(joint.len()) {
        return Err(Error::LengthMismatch {
            left: joint.len(),
            right: v.checked_pow(length as u32).unwrap_or(usize::MAX),
        });
    }
    TabularMlm::from_fn(vocab_size, length, |t, tokens| {
        let mut tokens = tokens.to_vec();
        let weights: Vec<f64> = (0..vocab_size)
            .map(|w| {
                tokens[t] = w;
                let idx = tokens.iter().fold(0usize, |acc, &x| acc * v + x as usize);
                joint.probs[idx]
            })
            .collect();
        let total: f64 = weights.iter().sum();
        weights.iter().map(|p| (p / total).ln()).collect()
    })
}

/// A square table of conditionals; row `r` is the distribution given the
/// conditioning value `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalTable {
    n: usize,
    matrix: Vec<f64>,
}

impl ConditionalTable {
    /// Rows must be square, strictly positive and sum to 1 within 1e-9.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::InvalidTable(format!("need at least 2 rows, got {n}")));
        }
        let mut matrix = Vec::with_capacity(n * n);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::InvalidTable(format!("row {i} has {} entries, expected {n}", r.len())));
            }
            if r.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
                return Err(Error::InvalidTable(format!("row {i} has a non-positive entry")));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidTable(format!("row {i} sums to {s}")));
            }
            matrix.extend_from_slice(r);
        }
        Ok(ConditionalTable { n, matrix })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// `p(value | given)`.
    pub fn get(&self, given: usize, value: usize) -> f64 {
        self.matrix[given * self.n + value]
    }

    /// Both conditionals of a joint `p(X1 = a, X2 = b) = joint[a][b]`:
    /// `(p(X1 | X2), p(X2 | X1))`.
    pub fn pair_from_joint(joint: &[Vec<f64>]) -> Result<(ConditionalTable, ConditionalTable)> {
        let n = joint.len();
        let c12 = (0..n)
            .map(|b| {
                let col: f64 = (0..n).map(|a| joint[a][b]).sum();
                (0..n).map(|a| joint[a][b] / col).collect()
            })
            .collect();
        let c21 = joint
            .iter()
            .map(|row| {
                let s: f64 = row.iter().sum();
                row.iter().map(|x| x / s).collect()
            })
            .collect();
        Ok((ConditionalTable::new(c12)?, ConditionalTable::new(c21)?))
    }

    /// Reads one row per line, entries separated by commas or whitespace.
    /// Blank lines and text after `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("");
            let row = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|f| !f.is_empty())
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::InvalidTable(format!("line {}: {f:?} is not a number", n + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            if !row.is_empty() {
                rows.push(row);
            }
        }
        ConditionalTable::new(rows)
    }

    /// The two-token, two-value tables where `X2` determines `X1` almost
    /// surely but `X1` says nothing about `X2`.
    pub fn inconsistent_example() -> (ConditionalTable, ConditionalTable) {
        (
            ConditionalTable::new(vec![vec![0.99, 0.01], vec![0.01, 0.99]]).unwrap(),
            ConditionalTable::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap(),
        )
    }
}

/// How far `c12 = p(X1 | X2)` and `c21 = p(X2 | X1)` are from describing a
/// single joint.
///
/// For a consistent pair, Bayes' rule forces
/// `D(a, b, b') = ln c12(a|b) - ln c12(a|b') - ln c21(b|a) + ln c21(b'|a)`
/// to equal `ln p(b') - ln p(b)` for every `a`. The gap is, over all
/// `(b, b')`, half the spread of `D` across `a`: the smallest worst-case
/// violation achievable by any choice of marginal ratio. The same quantity
/// with the roles of the two variables swapped is included and the larger
/// of the two is returned. It is zero exactly when the pair is consistent.
pub fn bayes_consistency_gap(c12: &ConditionalTable, c21: &ConditionalTable) -> Result<f64> {
    if c12.size() != c21.size() {
        return Err(Error::InvalidTable(format!(
            "tables have sizes {} and {}",
            c12.size(),
            c21.size()
        )));
    }
    let n = c12.size();
    // p(X1 = a | X2 = b) and p(X2 = b | X1 = a)
    let l12 = |a: usize, b: usize| c12.get(b, a).ln();
    let l21 = |b: usize, a: usize| c21.get(a, b).ln();
    let mut gap = 0.0f64;
    for u in 0..n {
        for w in 0..n {
            let mut lo = (f64::INFINITY, f64::INFINITY);
            let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for x in 0..n {
                // x plays X1 with (u, w) as X2 values, then the mirror
                let d = l12(x, u) - l12(x, w) - l21(u, x) + l21(w, x);
                let m = l21(x, u) - l21(x, w) - l12(u, x) + l12(w, x);
                lo = (lo.0.min(d), lo.1.min(m));
                hi = (hi.0.max(d), hi.1.max(m));
            }
            gap = gap.max(0.5 * (hi.0 - lo.0)).max(0.5 * (hi.1 - lo.1));
        }
    }
    Ok(gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq::Vocab;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn enumerate_uniform() {
        let m = TabularMlm::zeros(2, 2).unwrap();
        for kind in [EnergyKind::Raw, EnergyKind::Norm] {
            let d = enumerate_target(&m, 2, kind, 1.0).unwrap();
            assert!(d.probs.iter().all(|p| close(*p, 0.25, 1e-15)));
        }
    }

    #[test]
    fn enumerate_matches_direct_recomputation() {
        let m = TabularMlm::generate(7, 3, 3, 2.0).unwrap();
        let d = enumerate_target(&m, 3, EnergyKind::Raw, 1.0).unwrap();
        assert!(close(d.probs.iter().sum::<f64>(), 1.0, 1e-9));
        // independent: sum stored rows directly, exponentiate, normalize
        let mut w = Vec::new();
        for i in 0..27 {
            let s = Sequence::from_state_index(i, 3, m.vocab());
            let e: f64 = (0..3).map(|t| -m.row(t, m.context_key(s.tokens(), t))[s.get(t) as usize]).sum();
            w.push((-e).exp());
        }
        let z: f64 = w.iter().sum();
        for (p, x) in d.probs.iter().zip(&w) {
            assert!(close(*p, x / z, 1e-12));
        }
        assert!(close(d.log_z, z.ln(), 1e-12));
    }

    #[test]
    fn too_large_to_enumerate() {
        let m = TabularMlm::generate(1, 4, 9, 1.0).unwrap();
        assert!(matches!(
            enumerate_target(&m, 9, EnergyKind::Raw, 1.0),
            Err(Error::StateSpaceTooLarge { .. })
        ));
    }

    #[test]
    fn exact_conditional_examples() {
        let z = TabularMlm::zeros(3, 3).unwrap();
        let s = Sequence::new(vec![0, 1, 2], z.vocab()).unwrap();
        let d = exact_raw_conditional(&z, &s, 1).unwrap();
        assert!(d.probs().iter().all(|p| close(*p, 1.0 / 3.0, 1e-15)));
        assert_eq!(mismatch_pmlm_vs_raw(&z, &s, 1).unwrap(), 0.0);

        let one = TabularMlm::generate(3, 4, 1, 2.0).unwrap();
        let s = Sequence::new(vec![2], one.vocab()).unwrap();
        let exact = exact_raw_conditional(&one, &s, 0).unwrap();
        let free = mlm_conditional(&one, &apply_mask(&s, &[0]).unwrap(), 0).unwrap();
        assert!(total_variation(exact.probs(), free.probs()).unwrap() < 1e-15);
        assert!(mismatch_pmlm_vs_raw(&one, &s, 0).unwrap() < 1e-15);
    }

    #[test]
    fn exact_conditional_agrees_with_joint() {
        let m = TabularMlm::generate(7, 3, 3, 2.0).unwrap();
        let joint = enumerate_target(&m, 3, EnergyKind::Raw, 1.0).unwrap();
        for i in 0..27 {
            let s = Sequence::from_state_index(i, 3, m.vocab());
            for pos in 0..3 {
                let a = exact_raw_conditional(&m, &s, pos).unwrap();
                let b = joint_conditional(&joint, &s, pos);
                assert!(total_variation(a.probs(), b.probs()).unwrap() <= 1e-9);
            }
        }
    }

    #[test]
    fn free_conditional_differs_from_exact() {
        let m = TabularMlm::generate(7, 3, 3, 2.0).unwrap();
        let s = Sequence::new(vec![0, 1, 2], m.vocab()).unwrap();
        let gap = mismatch_pmlm_vs_raw(&m, &s, 1).unwrap();
        // free: softmax of the stored row; exact: softmax of summed stored entries
        let softmax = |x: &[f64]| {
            let z: f64 = x.iter().map(|v| v.exp()).sum();
            x.iter().map(|v| v.exp() / z).collect::<Vec<f64>>()
        };
        let free = softmax(m.row(1, m.context_key(s.tokens(), 1)));
        let scores: Vec<f64> = (0..3u32)
            .map(|w| {
                let toks = [0, w, 2];
                (0..3).map(|t| m.row(t, m.context_key(&toks, t))[toks[t] as usize]).sum()
            })
            .collect();
        let exact = softmax(&scores);
        let expect = 0.5 * free.iter().zip(&exact).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(close(gap, expect, 1e-12));
        assert!(gap > 0.01);
    }

    #[test]
    fn total_variation_examples() {
        assert_eq!(total_variation(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(total_variation(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(close(total_variation(&[0.7, 0.3], &[0.5, 0.5]).unwrap(), 0.2, 1e-15));
        assert_eq!(
            total_variation(&[1.0], &[0.5, 0.5]).unwrap_err(),
            Error::LengthMismatch { left: 1, right: 2 }
        );
    }

    #[test]
    fn stationary_examples() {
        let k = Kernel::from_dense(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let pi = stationary_distribution(&k).unwrap();
        assert!(close(pi[0], 0.5, 1e-15) && close(pi[1], 0.5, 1e-15));

        let id = Kernel::from_dense(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(stationary_distribution(&id).unwrap(), vec![1.0 / 3.0; 3]);

        let flip = Kernel::from_dense(&[vec![0.2, 0.8], vec![0.0, 1.0]]);
        let pi = stationary_distribution(&flip).unwrap();
        assert!(close(pi[1], 1.0, 1e-12));

        let periodic = Kernel::from_dense(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        // uniform is already fixed for the swap
        assert!(stationary_distribution(&periodic).is_ok());
        let periodic3 = Kernel::from_dense(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]);
        assert!(stationary_distribution_with(&periodic3, 1e-12, 10).is_ok());
        let skew = Kernel::from_dense(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let mut pi = vec![0.9, 0.1];
        pi = skew.apply_left(&pi);
        assert_eq!(pi, vec![0.1, 0.9]);
    }

    #[test]
    fn periodic_chain_does_not_converge() {
        // start is uniform, so use a chain whose uniform vector is not fixed
        let k = Kernel::from_dense(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]);
        assert!(matches!(
            stationary_distribution_with(&k, 1e-12, 1000),
            Err(Error::NoConvergence { .. })
        ));
    }

    #[test]
    fn uniform_mh_kernel() {
        let m = TabularMlm::zeros(2, 2).unwrap();
        let k = transition_kernel(&m, 2, SamplerSpec::mh(EnergyKind::Raw), &ProposalSettings::default()).unwrap();
        // each position resampled uniformly: off-diagonal 1/(T |V|), diagonal 1/|V|
        for x in 0..4 {
            for y in 0..4 {
                let hamming = (0..2).filter(|b| (x >> b) & 1 != (y >> b) & 1).count();
                let expect = match hamming {
                    0 => 0.5,
                    1 => 0.25,
                    _ => 0.0,
                };
                assert!(close(k.get(x, y), expect, 1e-15));
            }
        }
        let dense = k.to_dense();
        for j in 0..4 {
            let col: f64 = dense.iter().map(|r| r[j]).sum();
            assert!(close(col, 1.0, 1e-12));
        }
    }

    #[test]
    fn kernels_are_stochastic() {
        let m = TabularMlm::generate(3, 3, 3, 2.0).unwrap();
        let settings = ProposalSettings { temperature: 0.5, nucleus: 0.9 };
        for spec in [
            SamplerSpec::deg_gibbs(),
            SamplerSpec::mh(EnergyKind::Norm),
            SamplerSpec::mh(EnergyKind::Raw).with_block(2),
        ] {
            let k = transition_kernel(&m, 3, spec, &settings).unwrap();
            let (err, negative) = k.stochasticity_error();
            assert!(err < 1e-9 && !negative);
        }
    }

    #[test]
    fn kernel_matches_simulation() {
        use crate::proposal::propose_single;
        use crate::sampler::{mh_step, ChainState};
        let m = TabularMlm::generate(7, 2, 3, 2.0).unwrap();
        let settings = ProposalSettings::default();
        let k = transition_kernel(&m, 3, SamplerSpec::mh(EnergyKind::Raw), &settings).unwrap();
        let x = 5;
        let start = Sequence::from_state_index(x, 3, m.vocab());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut counts = [0usize; 8];
        let mut st = ChainState::new(&m, EnergyKind::Raw, start.clone(), ChaCha8Rng::seed_from_u64(1)).unwrap();
        for _ in 0..n {
            st = ChainState::new(&m, EnergyKind::Raw, start.clone(), st.rng.clone()).unwrap();
            let pos = rng.gen_range(0..3);
            let prop = propose_single(&m, &st.current, pos, &settings, &mut st.rng).unwrap();
            mh_step(&m, &mut st, prop).unwrap();
            counts[st.current.state_index()] += 1;
        }
        for (y, c) in counts.iter().enumerate() {
            let p = k.get(x, y);
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            let f = *c as f64 / n as f64;
            assert!((f - p).abs() <= 3.0 * sigma + 1e-12, "state {y}: {f} vs {p}");
        }
    }

    #[test]
    fn mh_is_exact_on_small_models() {
        for seed in [1u64, 2] {
            let m = TabularMlm::generate(seed, 3, 3, 2.0).unwrap();
            for kind in [EnergyKind::Raw, EnergyKind::Norm] {
                let c = check_sampler(&m, 3, SamplerSpec::mh(kind), &ProposalSettings::default()).unwrap();
                assert!(c.stationary_tv <= 1e-6, "{c:?}");
                assert!(c.detailed_balance_residual <= 1e-10, "{c:?}");
            }
        }
    }

    #[test]
    fn classes_examples() {
        let k = Kernel::from_dense(&[vec![0.5, 0.5, 0.0], vec![0.5, 0.5, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(communicating_classes(&k), vec![vec![0, 1], vec![2]]);
        let chain = Kernel::from_dense(&[vec![0.5, 0.5, 0.0], vec![0.0, 0.5, 0.5], vec![0.0, 0.0, 1.0]]);
        assert_eq!(communicating_classes(&chain), vec![vec![0], vec![1], vec![2]]);
        let cycle = Kernel::from_dense(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]);
        assert_eq!(communicating_classes(&cycle), vec![vec![0, 1, 2]]);
        let pi = [0.25, 0.25, 0.5];
        assert_eq!(within_class_tv(&communicating_classes(&k), &pi, &[0.1, 0.1, 0.8]), 0.0);
        assert!(close(within_class_tv(&[vec![0, 1, 2]], &pi, &[0.1, 0.1, 0.8]), 0.3, 1e-15));
    }

    #[test]
    fn truncated_proposals_can_split_the_chain() {
        // a token outside the nucleus at a position can never be left or
        // entered there, since both directions use the same conditional
        let m = TabularMlm::generate(1, 3, 3, 2.0).unwrap();
        let s = ProposalSettings { temperature: 0.5, nucleus: 0.9 };
        let c = check_sampler(&m, 3, SamplerSpec::mh(EnergyKind::Raw), &s).unwrap();
        assert!(c.classes > 1);
        assert!(c.detailed_balance_residual <= 1e-10);
        assert!(c.within_class_tv <= 1e-6);
    }

    #[test]
    fn symmetric_walk_is_balanced_under_uniform() {
        let k = Kernel::from_dense(&[vec![0.5, 0.25, 0.25], vec![0.25, 0.5, 0.25], vec![0.25, 0.25, 0.5]]);
        assert!(detailed_balance_residual(&k, &[1.0 / 3.0; 3]).unwrap() <= 1e-15);
        assert_eq!(
            detailed_balance_residual(&k, &[0.5, 0.5]).unwrap_err(),
            Error::ShapeMismatch { kernel: 3, target: 2 }
        );
    }

    #[test]
    fn gibbs_on_consistent_model_is_exact() {
        let m = TabularMlm::generate(11, 3, 3, 2.0).unwrap();
        let joint = enumerate_target(&m, 3, EnergyKind::Raw, 1.0).unwrap();
        let consistent = consistent_model(&joint, 3, 3).unwrap();
        let k = transition_kernel(&consistent, 3, SamplerSpec::deg_gibbs(), &ProposalSettings::default()).unwrap();
        let pi = stationary_distribution(&k).unwrap();
        assert!(total_variation(&pi, &joint.probs).unwrap() <= 1e-6);
        assert!(detailed_balance_residual(&k, &joint.probs).unwrap() <= 1e-10);
    }

    #[test]
    fn gap_on_inconsistent_example() {
        let (c12, c21) = ConditionalTable::inconsistent_example();
        let gap = bayes_consistency_gap(&c12, &c21).unwrap();
        assert!(close(gap, 99f64.ln(), 1e-9));
    }

    #[test]
    fn gap_vanishes_for_consistent_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 2..6 {
            let joint: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(0.01..1.0)).collect()).collect();
            let total: f64 = joint.iter().flatten().sum();
            let joint: Vec<Vec<f64>> = joint.iter().map(|r| r.iter().map(|x| x / total).collect()).collect();
            let (c12, c21) = ConditionalTable::pair_from_joint(&joint).unwrap();
            assert!(bayes_consistency_gap(&c12, &c21).unwrap() <= 1e-9);
        }
    }

    #[test]
    fn table_validation() {
        assert!(ConditionalTable::new(vec![vec![1.0]]).is_err());
        assert!(ConditionalTable::new(vec![vec![0.5, 0.5], vec![0.5]]).is_err());
        assert!(ConditionalTable::new(vec![vec![0.5, 0.6], vec![0.5, 0.5]]).is_err());
        assert!(ConditionalTable::new(vec![vec![1.0, 0.0], vec![0.5, 0.5]]).is_err());
        let a = ConditionalTable::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let b = ConditionalTable::new(vec![vec![0.2, 0.3, 0.5]; 3]).unwrap();
        assert!(bayes_consistency_gap(&a, &b).is_err());
        let _ = Vocab::new(2);
    }

    #[test]
    fn table_parsing() {
        let t = ConditionalTable::parse("# p(X1 | X2)\n0.99, 0.01\n\n0.01 0.99  # second row\n").unwrap();
        assert_eq!(t, ConditionalTable::inconsistent_example().0);
        assert!(ConditionalTable::parse("0.5 0.5\n0.5 x\n").is_err());
        assert!(ConditionalTable::parse("").is_err());
        assert!(ConditionalTable::parse("0.5 0.5\n0.5 0.5 0.0\n").is_err());
    }

    #[test]
    fn csv_exports() {
        let k = Kernel::from_dense(&[vec![0.5, 0.5], vec![0.0, 1.0]]);
        let mut buf = Vec::new();
        k.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("row,col,value\n0,0,5e-1\n"));
        let mut buf = Vec::new();
        write_distribution_csv(&mut buf, &[0.25, 0.75]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "index,value\n0,2.5e-1\n1,7.5e-1\n");
    }
}
