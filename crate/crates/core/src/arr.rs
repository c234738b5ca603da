//! Adaptive randomized response over embedding features.
//!
//! Every feature `i` of every token `t` is randomized independently: the original value is kept
//! with probability `p_i = e^β / (e^β + |V| - 1)`, otherwise it is replaced by the value of
//! another token `k`, chosen with weight `exp(-|e_t^i - e_k^i| / m)`. `β` is the largest value
//! permitted by the per-feature budget `ε_i` (see [`beta_bounds`]).
//!
//! Two routes compute the same per-cell statistics: a direct `O(|V|)` scan used by the exact
//! audits, and a sorted-column index with prefix sums used by the builder and the sampler.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;
use crate::wire::{truncation_as_format, Reader};

/// Upper size for the exact enumeration audits.
pub const AUDIT_LIMIT: usize = 4096;

pub const INDVOCAB_MAGIC: &[u8; 4] = b"NIND";
pub const INDVOCAB_VERSION: u16 = 1;

const FEASIBILITY_TOL: f64 = 1e-12;
const SUM_TOL: f64 = 1e-12;

/// Above this spread (in units of `m`) the prefix sums would lose range; fall back to direct sums.
const INDEX_SPREAD_LIMIT: f64 = 600.0;

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `ln σ(x) = -ln(1 + e^{-x})`.
fn ln_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Neumaier-compensated sum.
fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Composition: the total budget of independently randomized features is the sum of theirs.
pub fn compose_budget(per_feature: &[f64]) -> Result<f64> {
    if let Some(bad) = per_feature.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return Err(Error::argument(format!(
            "per-feature budgets must be finite and >= 0, got {bad}"
        )));
    }
    Ok(compensated_sum(per_feature))
}

/// Total budget `ε` and its split over features.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetPlan {
    total_epsilon: f64,
    per_feature: Vec<f64>,
}

impl BudgetPlan {
    /// Splits `total` evenly over `dim` features.
    pub fn uniform(total: f64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::argument("budget plan needs at least one feature"));
        }
        if !(total.is_finite() && total >= 0.0) {
            return Err(Error::argument(format!("total epsilon must be finite and >= 0, got {total}")));
        }
        Self::from_per_feature(vec![total / dim as f64; dim])
    }

    pub fn from_per_feature(per_feature: Vec<f64>) -> Result<Self> {
        if per_feature.is_empty() {
            return Err(Error::argument("budget plan needs at least one feature"));
        }
        let total_epsilon = compose_budget(&per_feature)?;
        Ok(Self {
            total_epsilon,
            per_feature,
        })
    }

    /// Rebuilds a plan from stored parts, checking that the split sums to the total.
    pub fn from_parts(total_epsilon: f64, per_feature: Vec<f64>) -> Result<Self> {
        let plan = Self::from_per_feature(per_feature)?;
        let scale = total_epsilon.abs().max(f64::MIN_POSITIVE);
        if (plan.total_epsilon - total_epsilon).abs() > SUM_TOL * scale.max(1.0) {
            return Err(Error::Validation(format!(
                "per-feature budgets sum to {} but total is {}",
                plan.total_epsilon, total_epsilon
            )));
        }
        Ok(Self {
            total_epsilon,
            per_feature: plan.per_feature,
        })
    }

    pub fn total_epsilon(&self) -> f64 {
        self.total_epsilon
    }

    pub fn per_feature(&self) -> &[f64] {
        &self.per_feature
    }

    pub fn dim(&self) -> usize {
        self.per_feature.len()
    }

    fn check_dim(&self, vocab: &Vocabulary) -> Result<()> {
        if self.dim() != vocab.dim() {
            return Err(Error::DimensionMismatch(format!(
                "plan has {} features, vocabulary has {}",
                self.dim(),
                vocab.dim()
            )));
        }
        Ok(())
    }
}

/// How the replacement weights are normalized.
///
/// `ExcludeSelf` normalizes the replacement weights over the other tokens only, so the keep and
/// replacement probabilities sum to one. `IncludeSelf` keeps the original token's own
/// `exp(0)` term in the denominator and assigns the leftover mass to the keep outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum DenominatorPolicy {
    IncludeSelf,
    #[default]
    ExcludeSelf,
}

impl DenominatorPolicy {
    pub fn to_u8(self) -> u8 {
        match self {
            DenominatorPolicy::IncludeSelf => 0,
            DenominatorPolicy::ExcludeSelf => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(DenominatorPolicy::IncludeSelf),
            1 => Ok(DenominatorPolicy::ExcludeSelf),
            other => Err(Error::format(format!("unknown denominator policy {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DenominatorPolicy::IncludeSelf => "include-self",
            DenominatorPolicy::ExcludeSelf => "exclude-self",
        }
    }
}

impl std::str::FromStr for DenominatorPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "include-self" => Ok(DenominatorPolicy::IncludeSelf),
            "exclude-self" => Ok(DenominatorPolicy::ExcludeSelf),
            other => Err(Error::argument(format!(
                "unknown policy {other:?} (expected include-self or exclude-self)"
            ))),
        }
    }
}

/// Per-(token, feature) distance statistics in 64-bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellStats {
    pub delta_min: f64,
    pub delta_max: f64,
    /// `ln Σ_{l≠t} exp(-Δ_l/m)`.
    pub ln_sum_others: f64,
    pub vocab_size: usize,
    pub dim: usize,
}

impl CellStats {
    pub fn min_feasible_epsilon(&self) -> f64 {
        (self.delta_max - self.delta_min) / self.dim as f64
    }

    /// Log of the replacement-weight denominator under `policy`.
    pub fn ln_denominator(&self, policy: DenominatorPolicy) -> f64 {
        match policy {
            DenominatorPolicy::ExcludeSelf => self.ln_sum_others,
            DenominatorPolicy::IncludeSelf => log_add_exp(0.0, self.ln_sum_others),
        }
    }

    fn ln_psi(&self) -> f64 {
        ((self.vocab_size - 1) as f64).ln()
    }

    fn beta_bounds(&self, eps_i: f64, policy: DenominatorPolicy) -> (f64, f64) {
        let m = self.dim as f64;
        let ln_den = self.ln_denominator(policy);
        let lower = self.ln_psi() - self.delta_min / m - ln_den;
        let upper = eps_i + self.ln_psi() - self.delta_max / m - ln_den;
        (lower, upper)
    }

    fn check_feasible(&self, token: usize, feature: usize, eps_i: f64) -> Result<()> {
        if !(eps_i.is_finite() && eps_i >= 0.0) {
            return Err(Error::argument(format!("eps_i must be finite and >= 0, got {eps_i}")));
        }
        let minimal = self.min_feasible_epsilon();
        if eps_i < minimal - FEASIBILITY_TOL * minimal.max(1.0) {
            return Err(Error::InfeasibleFeature {
                token,
                feature,
                epsilon: eps_i,
                minimal,
            });
        }
        Ok(())
    }

    /// Log keep probability and the log factor shared by all replacement weights
    /// (`ln q_{i,k} = factor - Δ_k/m`).
    fn log_keep_and_factor(&self, eps_i: f64, policy: DenominatorPolicy) -> (f64, f64) {
        let (_, beta) = self.beta_bounds(eps_i, policy);
        let x = beta - self.ln_psi();
        let ln_p = ln_sigmoid(x);
        let ln_not_p = ln_sigmoid(-x);
        match policy {
            DenominatorPolicy::ExcludeSelf => (ln_p, ln_not_p - self.ln_sum_others),
            DenominatorPolicy::IncludeSelf => {
                let ln_den = self.ln_denominator(policy);
                (log_add_exp(ln_p, ln_not_p - ln_den), ln_not_p - ln_den)
            }
        }
    }
}

/// Direct `O(|V|)` statistics for one cell.
pub fn cell_stats(vocab: &Vocabulary, token: usize, feature: usize) -> Result<CellStats> {
    vocab.check_cell(token, feature)?;
    let m = vocab.dim() as f64;
    let own = vocab.value(token, feature) as f64;
    let deltas: Vec<f64> = (0..vocab.len())
        .filter(|&k| k != token)
        .map(|k| (own - vocab.value(k, feature) as f64).abs())
        .collect();
    let delta_min = deltas.iter().copied().fold(f64::INFINITY, f64::min);
    let delta_max = deltas.iter().copied().fold(0.0, f64::max);
    let ln_sum_others = log_sum_exp(deltas.iter().map(|d| -d / m));
    Ok(CellStats {
        delta_min,
        delta_max,
        ln_sum_others,
        vocab_size: vocab.len(),
        dim: vocab.dim(),
    })
}

/// Sorted view of one feature column with prefix sums of `exp(±v/m)`, giving each token's
/// replacement denominator in `O(1)` and each replacement draw in `O(log |V|)`.
#[derive(Debug, Clone)]
pub struct ColumnIndex {
    dim: usize,
    sorted: Vec<f64>,
    /// sorted position -> token
    order: Vec<usize>,
    /// token -> sorted position
    rank: Vec<usize>,
    lo: f64,
    hi: f64,
    /// `left[k] = Σ_{p<k} exp((v_p - hi)/m)`
    left: Vec<f64>,
    /// `right[k] = Σ_{p>=k} exp((lo - v_p)/m)`
    right: Vec<f64>,
    direct: bool,
}

impl ColumnIndex {
    pub fn new(vocab: &Vocabulary, feature: usize) -> Result<Self> {
        vocab.check_cell(0, feature)?;
        let n = vocab.len();
        let m = vocab.dim() as f64;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            vocab
                .value(a, feature)
                .total_cmp(&vocab.value(b, feature))
                .then(a.cmp(&b))
        });
        let sorted: Vec<f64> = order.iter().map(|&t| vocab.value(t, feature) as f64).collect();
        let mut rank = vec![0; n];
        for (pos, &t) in order.iter().enumerate() {
            rank[t] = pos;
        }
        let lo = sorted[0];
        let hi = sorted[n - 1];
        let direct = (hi - lo) / m > INDEX_SPREAD_LIMIT;
        let mut left = vec![0.0; n + 1];
        let mut right = vec![0.0; n + 1];
        if !direct {
            for p in 0..n {
                left[p + 1] = left[p] + ((sorted[p] - hi) / m).exp();
            }
            for p in (0..n).rev() {
                right[p] = right[p + 1] + ((lo - sorted[p]) / m).exp();
            }
        }
        Ok(Self {
            dim: vocab.dim(),
            sorted,
            order,
            rank,
            lo,
            hi,
            left,
            right,
            direct,
        })
    }

    fn len(&self) -> usize {
        self.sorted.len()
    }

    /// Log of the left (values below in sorted order) and right replacement masses of `token`.
    fn side_masses(&self, token: usize) -> (f64, f64) {
        let m = self.dim as f64;
        let r = self.rank[token];
        let v = self.sorted[r];
        if self.direct {
            let l = log_sum_exp(self.sorted[..r].iter().map(|u| -(v - u) / m));
            let rt = log_sum_exp(self.sorted[r + 1..].iter().map(|u| -(u - v) / m));
            return (l, rt);
        }
        let ln = |x: f64| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY };
        (
            (self.hi - v) / m + ln(self.left[r]),
            (v - self.lo) / m + ln(self.right[r + 1]),
        )
    }

    pub fn stats(&self, token: usize) -> CellStats {
        let n = self.len();
        let r = self.rank[token];
        let v = self.sorted[r];
        let mut delta_min = f64::INFINITY;
        if r > 0 {
            delta_min = delta_min.min(v - self.sorted[r - 1]);
        }
        if r + 1 < n {
            delta_min = delta_min.min(self.sorted[r + 1] - v);
        }
        let delta_max = (v - self.lo).max(self.hi - v);
        let (l, rt) = self.side_masses(token);
        CellStats {
            delta_min,
            delta_max,
            ln_sum_others: log_add_exp(l, rt),
            vocab_size: n,
            dim: self.dim,
        }
    }

    /// Draws a replacement token for `token` with weights `exp(-Δ_k/m)` over `k ≠ token`,
    /// using one uniform `u ∈ [0, 1)`.
    fn sample_replacement(&self, token: usize, u: f64) -> usize {
        let m = self.dim as f64;
        let r = self.rank[token];
        let v = self.sorted[r];
        let n = self.len();
        if self.direct {
            let weights: Vec<(usize, f64)> = (0..n)
                .filter(|&p| p != r)
                .map(|p| (p, (-(self.sorted[p] - v).abs() / m).exp()))
                .collect();
            let target = u * weights.iter().map(|(_, w)| w).sum::<f64>();
            let mut acc = 0.0;
            for &(p, w) in &weights {
                acc += w;
                if target < acc {
                    return self.order[p];
                }
            }
            return self.order[weights[weights.len() - 1].0];
        }
        // Masses of the two sides on a common scale.
        let left_mass = ((self.hi - v) / m).exp() * self.left[r];
        let right_mass = ((v - self.lo) / m).exp() * self.right[r + 1];
        let target = u * (left_mass + right_mass);
        if target < left_mass && r > 0 {
            // Find smallest p < r with left[p + 1] > target / scale.
            let t = target / ((self.hi - v) / m).exp();
            let p = self.left[1..=r].partition_point(|&c| c <= t).min(r - 1);
            self.order[p]
        } else if r + 1 < n {
            // Right side: cumulative from r+1 upward is right[r+1] - right[p+1].
            let t = ((target - left_mass).max(0.0)) / ((v - self.lo) / m).exp();
            let base = self.right[r + 1];
            let p = self.right[r + 2..=n].partition_point(|&c| base - c <= t);
            self.order[(r + 1 + p).min(n - 1)]
        } else {
            self.order[r - 1]
        }
    }
}

/// `(Δ_max - Δ_min) / m`: the smallest `ε_i` for which the `β` band of this cell is nonempty.
pub fn min_feasible_epsilon(vocab: &Vocabulary, token: usize, feature: usize) -> Result<f64> {
    Ok(cell_stats(vocab, token, feature)?.min_feasible_epsilon())
}

/// Lower and upper admissible `β_i` for one cell. The sampler always uses the upper bound.
pub fn beta_bounds(
    vocab: &Vocabulary,
    token: usize,
    feature: usize,
    eps_i: f64,
    policy: DenominatorPolicy,
) -> Result<(f64, f64)> {
    let stats = cell_stats(vocab, token, feature)?;
    stats.check_feasible(token, feature, eps_i)?;
    Ok(stats.beta_bounds(eps_i, policy))
}

/// Output distribution of one cell, one entry per token of the vocabulary. Entry `token` is
/// the keep probability; other entries are the replacement probabilities `q_{i,k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrDistribution {
    pub token: usize,
    pub feature: usize,
    pub beta: f64,
    pub values: Vec<f32>,
    pub probabilities: Vec<f64>,
}

impl ArrDistribution {
    pub fn keep(&self) -> f64 {
        self.probabilities[self.token]
    }

    pub fn max_replacement(&self) -> f64 {
        self.probabilities
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != self.token)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max)
    }

    pub fn total(&self) -> f64 {
        compensated_sum(&self.probabilities)
    }
}

fn log_probabilities(
    vocab: &Vocabulary,
    token: usize,
    feature: usize,
    eps_i: f64,
    policy: DenominatorPolicy,
) -> Result<(f64, Vec<f64>)> {
    let stats = cell_stats(vocab, token, feature)?;
    stats.check_feasible(token, feature, eps_i)?;
    let (_, beta) = stats.beta_bounds(eps_i, policy);
    let (ln_keep, factor) = stats.log_keep_and_factor(eps_i, policy);
    let m = vocab.dim() as f64;
    let own = vocab.value(token, feature) as f64;
    let logs = (0..vocab.len())
        .map(|k| {
            if k == token {
                ln_keep
            } else {
                factor - (own - vocab.value(k, feature) as f64).abs() / m
            }
        })
        .collect();
    Ok((beta, logs))
}

/// Keep and replacement probabilities of one cell, with `β` at its upper bound.
pub fn arr_probabilities(
    vocab: &Vocabulary,
    token: usize,
    feature: usize,
    eps_i: f64,
    policy: DenominatorPolicy,
) -> Result<ArrDistribution> {
    let (beta, logs) = log_probabilities(vocab, token, feature, eps_i, policy)?;
    Ok(ArrDistribution {
        token,
        feature,
        beta,
        values: vocab.column(feature),
        probabilities: logs.into_iter().map(f64::exp).collect(),
    })
}

/// A distribution over bitwise-distinct feature values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDistribution {
    pub support: Vec<f32>,
    pub probabilities: Vec<f64>,
}

impl FeatureDistribution {
    pub fn probability_of(&self, value: f32) -> f64 {
        self.support
            .iter()
            .position(|v| v.to_bits() == value.to_bits())
            .map(|i| self.probabilities[i])
            .unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        compensated_sum(&self.probabilities)
    }
}

fn check_audit_size(vocab: &Vocabulary) -> Result<()> {
    if vocab.len() > AUDIT_LIMIT {
        return Err(Error::TooLarge {
            what: "vocabulary",
            size: vocab.len(),
            limit: AUDIT_LIMIT,
        });
    }
    Ok(())
}

/// Distinct values of a column in first-occurrence order, and the token -> support index map.
fn group_column(column: &[f32]) -> (Vec<f32>, Vec<usize>) {
    let mut support = Vec::new();
    let mut seen: HashMap<u32, usize> = HashMap::new();
    let groups = column
        .iter()
        .map(|v| {
            *seen.entry(v.to_bits()).or_insert_with(|| {
                support.push(*v);
                support.len() - 1
            })
        })
        .collect();
    (support, groups)
}

/// Log-probabilities of one cell aggregated over distinct output values.
fn grouped_log_distribution(
    vocab: &Vocabulary,
    token: usize,
    feature: usize,
    eps_i: f64,
    policy: DenominatorPolicy,
    groups: &[usize],
    support_len: usize,
) -> Result<Vec<f64>> {
    let (_, logs) = log_probabilities(vocab, token, feature, eps_i, policy)?;
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); support_len];
    for (k, lp) in logs.into_iter().enumerate() {
        buckets[groups[k]].push(lp);
    }
    Ok(buckets.into_iter().map(log_sum_exp).collect())
}

/// Exact output distribution of one cell, with tokens sharing a value merged.
pub fn exact_feature_distribution(
    vocab: &Vocabulary,
    token: usize,
    feature: usize,
    eps_i: f64,
    policy: DenominatorPolicy,
) -> Result<FeatureDistribution> {
    check_audit_size(vocab)?;
    vocab.check_cell(token, feature)?;
    let (support, groups) = group_column(&vocab.column(feature));
    let logs = grouped_log_distribution(vocab, token, feature, eps_i, policy, &groups, support.len())?;
    Ok(FeatureDistribution {
        support,
        probabilities: logs.into_iter().map(f64::exp).collect(),
    })
}

/// Per-feature exact log-likelihood tables: `table[t][z] = ln P[ARR(e_t^i) = support[z]]`.
#[derive(Debug, Clone)]
pub struct FeatureLikelihoods {
    pub support: Vec<f32>,
    pub log_probs: Vec<Vec<f64>>,
}

impl FeatureLikelihoods {
    pub fn new(vocab: &Vocabulary, plan: &BudgetPlan, feature: usize, policy: DenominatorPolicy) -> Result<Self> {
        check_audit_size(vocab)?;
        plan.check_dim(vocab)?;
        vocab.check_cell(0, feature)?;
        let (support, groups) = group_column(&vocab.column(feature));
        let eps_i = plan.per_feature()[feature];
        let log_probs = (0..vocab.len())
            .map(|t| grouped_log_distribution(vocab, t, feature, eps_i, policy, &groups, support.len()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { support, log_probs })
    }

    pub fn support_index(&self, value: f32) -> Option<usize> {
        self.support.iter().position(|v| v.to_bits() == value.to_bits())
    }

    /// `max_{t,t',z} ln(P_t(z) / P_t'(z))`.
    pub fn max_log_ratio(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for z in 0..self.support.len() {
            let column = self.log_probs.iter().map(|row| row[z]);
            let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
            if hi == f64::NEG_INFINITY {
                continue;
            }
            if lo == f64::NEG_INFINITY {
                return f64::INFINITY;
            }
            worst = worst.max(hi - lo);
        }
        worst
    }
}

/// Measured privacy loss of the mechanism as implemented.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveEpsilon {
    pub per_feature: Vec<f64>,
    pub total: f64,
}

/// Exhaustive audit: for each feature, the largest log-likelihood ratio between any two tokens
/// over any output value. The total is the sum over features.
pub fn measure_effective_epsilon(
    vocab: &Vocabulary,
    plan: &BudgetPlan,
    policy: DenominatorPolicy,
) -> Result<EffectiveEpsilon> {
    check_audit_size(vocab)?;
    plan.check_dim(vocab)?;
    let per_feature = (0..vocab.dim())
        .map(|i| Ok(FeatureLikelihoods::new(vocab, plan, i, policy)?.max_log_ratio()))
        .collect::<Result<Vec<f64>>>()?;
    let total = per_feature.iter().sum();
    Ok(EffectiveEpsilon { per_feature, total })
}

/// Keyed generator for one cell; the stream id packs (token, feature).
fn cell_rng(seed: u64, token: usize, feature: usize) -> ChaCha8Rng {
    debug_assert!(feature < 1 << 24 && (token as u64) < 1 << 40);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((token as u64) << 24) | feature as u64);
    rng
}

fn randomize_with_index(
    index: &ColumnIndex,
    token: usize,
    feature: usize,
    eps_i: f64,
    policy: DenominatorPolicy,
    seed: u64,
) -> Result<f32> {
    let stats = index.stats(token);
    stats.check_feasible(token, feature, eps_i)?;
    let (ln_keep, _) = stats.log_keep_and_factor(eps_i, policy);
    let mut rng = cell_rng(seed, token, feature);
    let u_keep: f64 = rng.gen();
    let u_pick: f64 = rng.gen();
    let chosen = if u_keep < ln_keep.exp() {
        token
    } else {
        index.sample_replacement(token, u_pick)
    };
    Ok(index.sorted[index.rank[chosen]] as f32)
}

/// Samples the randomized value of one cell; a pure function of `(seed, token, feature)`.
pub fn randomize_feature(
    vocab: &Vocabulary,
    token: usize,
    feature: usize,
    eps_i: f64,
    policy: DenominatorPolicy,
    seed: u64,
) -> Result<f32> {
    vocab.check_cell(token, feature)?;
    let index = ColumnIndex::new(vocab, feature)?;
    randomize_with_index(&index, token, feature, eps_i, policy, seed)
}

/// A vocabulary whose embeddings have each been randomized exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct IndVocab {
    randomized: Vocabulary,
    plan: BudgetPlan,
    seed: u64,
    policy: DenominatorPolicy,
    source_digest: [u8; 32],
}

impl IndVocab {
    pub fn randomized(&self) -> &Vocabulary {
        &self.randomized
    }

    pub fn tokens(&self) -> &[String] {
        self.randomized.tokens()
    }

    pub fn row(&self, token: usize) -> &[f32] {
        self.randomized.row(token)
    }

    pub fn len(&self) -> usize {
        self.randomized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.randomized.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.randomized.dim()
    }

    pub fn plan(&self) -> &BudgetPlan {
        &self.plan
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn policy(&self) -> DenominatorPolicy {
        self.policy
    }

    pub fn source_digest(&self) -> &[u8; 32] {
        &self.source_digest
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDVOCAB_MAGIC);
        out.extend_from_slice(&INDVOCAB_VERSION.to_le_bytes());
        out.extend_from_slice(&self.source_digest);
        out.extend_from_slice(&self.plan.total_epsilon().to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.push(self.policy.to_u8());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for e in self.plan.per_feature() {
            out.extend_from_slice(&e.to_le_bytes());
        }
        out.extend_from_slice(&self.randomized.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let out = Self::read(&mut r).map_err(truncation_as_format)?;
        if r.remaining() != 0 {
            return Err(Error::format("trailing bytes after randomized matrix"));
        }
        Ok(out)
    }

    fn read(r: &mut Reader<'_>) -> Result<Self> {
        if r.take(4)? != INDVOCAB_MAGIC {
            return Err(Error::format("bad IndVocab magic"));
        }
        let version = r.u16()?;
        if version != INDVOCAB_VERSION {
            return Err(Error::format(format!("unsupported IndVocab version {version}")));
        }
        let mut source_digest = [0u8; 32];
        source_digest.copy_from_slice(r.take(32)?);
        let total = r.f64()?;
        let dim = r.u32()? as usize;
        let size = r.u32()? as usize;
        let policy = DenominatorPolicy::from_u8(r.u8()?)?;
        let seed = r.u64()?;
        if dim.saturating_mul(8) > r.remaining() {
            return Err(Error::format("budget array exceeds file size"));
        }
        let per_feature = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let plan = BudgetPlan::from_parts(total, per_feature)?;
        let randomized = Vocabulary::read(r)?;
        if randomized.dim() != dim || randomized.len() != size {
            return Err(Error::format(format!(
                "header declares {size} x {dim} but matrix is {} x {}",
                randomized.len(),
                randomized.dim()
            )));
        }
        Ok(Self {
            randomized,
            plan,
            seed,
            policy,
            source_digest,
        })
    }

    /// Checks this table against the vocabulary it claims to derive from.
    pub fn audit_against(&self, source: &Vocabulary) -> IndVocabAudit {
        let digest_matches = source.digest() == self.source_digest;
        let shape_matches = source.len() == self.len()
            && source.dim() == self.dim()
            && source.tokens() == self.tokens();
        let support_closed = shape_matches
            && (0..source.dim()).all(|i| {
                let col: std::collections::HashSet<u32> =
                    source.column(i).iter().map(|v| v.to_bits()).collect();
                (0..self.len()).all(|t| col.contains(&self.randomized.value(t, i).to_bits()))
            });
        let rebuild_matches = shape_matches
            && build_indvocab(source, &self.plan, self.seed, self.policy)
                .map(|rebuilt| rebuilt.randomized == self.randomized)
                .unwrap_or(false);
        IndVocabAudit {
            digest_matches,
            support_closed,
            rebuild_matches,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndVocabAudit {
    pub digest_matches: bool,
    pub support_closed: bool,
    pub rebuild_matches: bool,
}

impl IndVocabAudit {
    pub fn ok(&self) -> bool {
        self.digest_matches && self.support_closed && self.rebuild_matches
    }
}

pub fn load_indvocab(path: impl AsRef<Path>) -> Result<IndVocab> {
    IndVocab::from_bytes(&fs::read(path)?)
}

pub fn save_indvocab(ind: &IndVocab, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ind.to_bytes())?;
    Ok(())
}

/// Column indexes plus a feasibility check covering every cell. On failure the error lists
/// the violating cells and the smallest feasible total with the same split.
fn prepare(vocab: &Vocabulary, plan: &BudgetPlan) -> Result<Vec<ColumnIndex>> {
    plan.check_dim(vocab)?;
    let indexes = (0..vocab.dim())
        .into_par_iter()
        .map(|i| ColumnIndex::new(vocab, i))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::new();
    let mut needed = vec![0.0f64; vocab.dim()];
    for (i, index) in indexes.iter().enumerate() {
        let eps_i = plan.per_feature()[i];
        for t in 0..vocab.len() {
            let minimal = index.stats(t).min_feasible_epsilon();
            needed[i] = needed[i].max(minimal);
            if eps_i < minimal - FEASIBILITY_TOL * minimal.max(1.0) {
                cells.push((t, i, minimal));
            }
        }
    }
    if cells.is_empty() {
        return Ok(indexes);
    }
    let minimal_any_split = compensated_sum(&needed);
    let scale = needed
        .iter()
        .zip(plan.per_feature())
        .map(|(n, e)| if *n == 0.0 { 0.0 } else { n / e })
        .fold(0.0f64, f64::max);
    let minimal_total = if scale.is_finite() {
        scale * plan.total_epsilon()
    } else {
        minimal_any_split
    };
    Err(Error::InfeasibleBudget {
        violations: cells.len(),
        cells,
        minimal_total,
        minimal_any_split,
    })
}

fn finish(
    vocab: &Vocabulary,
    plan: &BudgetPlan,
    seed: u64,
    policy: DenominatorPolicy,
    matrix: Vec<f32>,
) -> Result<IndVocab> {
    Ok(IndVocab {
        randomized: Vocabulary::new(vocab.tokens().to_vec(), matrix, vocab.dim())?,
        plan: plan.clone(),
        seed,
        policy,
        source_digest: vocab.digest(),
    })
}

/// Randomizes every feature of every token once, in parallel over tokens.
pub fn build_indvocab(
    vocab: &Vocabulary,
    plan: &BudgetPlan,
    seed: u64,
    policy: DenominatorPolicy,
) -> Result<IndVocab> {
    let indexes = prepare(vocab, plan)?;
    let rows = (0..vocab.len())
        .into_par_iter()
        .map(|t| {
            (0..vocab.dim())
                .map(|i| randomize_with_index(&indexes[i], t, i, plan.per_feature()[i], policy, seed))
                .collect::<Result<Vec<f32>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    finish(vocab, plan, seed, policy, rows.concat())
}

/// Single-threaded build; produces exactly the same table as [`build_indvocab`].
pub fn build_indvocab_serial(
    vocab: &Vocabulary,
    plan: &BudgetPlan,
    seed: u64,
    policy: DenominatorPolicy,
) -> Result<IndVocab> {
    let indexes = prepare(vocab, plan)?;
    let mut matrix = Vec::with_capacity(vocab.len() * vocab.dim());
    for t in 0..vocab.len() {
        for (i, index) in indexes.iter().enumerate() {
            matrix.push(randomize_with_index(index, t, i, plan.per_feature()[i], policy, seed)?);
        }
    }
    finish(vocab, plan, seed, policy, matrix)
}
