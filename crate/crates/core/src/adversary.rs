//! Attacks run by an honest-but-curious cloud: Bayes-optimal token reconstruction from
//! randomized embeddings, the prompt reconstruction game, a frequency attack on repeated
//! observations, and attack-success scoring.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::arr::{BudgetPlan, DenominatorPolicy, FeatureLikelihoods, IndVocab};
use crate::error::{Error, Result};
use crate::metrics::{bleu, code_bleu, fusi, rouge_f1, FusiScore};
use crate::vocab::Vocabulary;

/// Win thresholds for the reconstruction games.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GameThresholds {
    /// Bleu threshold on a 0-100 scale.
    pub rho_b: f64,
    /// Rouge-F1 threshold in `[0, 1]`.
    pub rho_r: f64,
    /// Functional-similarity threshold in `[0, 1)`; the attacker wins above it.
    pub rho_f: f64,
    /// Simplified CodeBleu threshold on a 0-100 scale.
    pub rho_cb: f64,
}

impl Default for GameThresholds {
    fn default() -> Self {
        Self {
            rho_b: 20.0,
            rho_r: 0.4,
            rho_f: 0.0,
            rho_cb: 20.0,
        }
    }
}

impl GameThresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=100.0).contains(&self.rho_b)
            && (0.0..=100.0).contains(&self.rho_cb)
            && (0.0..=1.0).contains(&self.rho_r)
            && (0.0..1.0).contains(&self.rho_f);
        if !ok {
            return Err(Error::argument(format!("thresholds out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Uniform-prior posterior over source tokens for one observed randomized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub probabilities: Vec<f64>,
    /// Most likely token; the lowest index wins ties.
    pub argmax: usize,
}

/// Worst-case attacker that knows the source vocabulary, the budget plan and the policy, and
/// computes exact likelihoods of every observed feature value.
#[derive(Debug, Clone)]
pub struct BayesAttacker {
    likelihoods: Vec<FeatureLikelihoods>,
    vocab_size: usize,
}

/// Largest output space enumerated by the exact accuracy and containment audits.
pub const ENUMERATION_LIMIT: usize = 1 << 22;

impl BayesAttacker {
    pub fn new(source: &Vocabulary, plan: &BudgetPlan, policy: DenominatorPolicy) -> Result<Self> {
        let likelihoods = (0..source.dim())
            .map(|i| FeatureLikelihoods::new(source, plan, i, policy))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            likelihoods,
            vocab_size: source.len(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// `Σ_i ln P[feature i = observed_i | t]` for every token `t`.
    pub fn log_scores(&self, observed: &[f32]) -> Result<Vec<f64>> {
        if observed.len() != self.likelihoods.len() {
            return Err(Error::DimensionMismatch(format!(
                "observation has {} features, attacker expects {}",
                observed.len(),
                self.likelihoods.len()
            )));
        }
        let mut scores = vec![0.0; self.vocab_size];
        for (feature, (table, &value)) in self.likelihoods.iter().zip(observed).enumerate() {
            let z = table.support_index(value).ok_or(Error::ZeroLikelihood { feature })?;
            for (s, row) in scores.iter_mut().zip(&table.log_probs) {
                *s += row[z];
            }
        }
        if scores.iter().all(|s| *s == f64::NEG_INFINITY) {
            return Err(Error::ZeroLikelihood {
                feature: self.likelihoods.len(),
            });
        }
        Ok(scores)
    }

    pub fn posterior(&self, observed: &[f32]) -> Result<Posterior> {
        Ok(posterior_from_scores(&self.log_scores(observed)?))
    }

    pub fn guess(&self, observed: &[f32]) -> Result<usize> {
        Ok(argmax(&self.log_scores(observed)?))
    }

    fn output_space(&self) -> Result<Vec<usize>> {
        let sizes: Vec<usize> = self.likelihoods.iter().map(|l| l.support.len()).collect();
        let total = sizes.iter().try_fold(1usize, |acc, &s| acc.checked_mul(s));
        match total {
            Some(t) if t <= ENUMERATION_LIMIT => Ok(sizes),
            _ => Err(Error::TooLarge {
                what: "randomized output space",
                size: total.unwrap_or(usize::MAX),
                limit: ENUMERATION_LIMIT,
            }),
        }
    }

    /// Calls `f` with the per-token log-likelihoods of every possible randomized embedding.
    fn for_each_output(&self, mut f: impl FnMut(&[f64])) -> Result<()> {
        let sizes = self.output_space()?;
        let mut idx = vec![0usize; sizes.len()];
        let mut scores = vec![0.0; self.vocab_size];
        loop {
            scores.iter_mut().for_each(|s| *s = 0.0);
            for (table, &z) in self.likelihoods.iter().zip(&idx) {
                for (s, row) in scores.iter_mut().zip(&table.log_probs) {
                    *s += row[z];
                }
            }
            f(&scores);
            let mut i = 0;
            loop {
                if i == sizes.len() {
                    return Ok(());
                }
                idx[i] += 1;
                if idx[i] < sizes[i] {
                    break;
                }
                idx[i] = 0;
                i += 1;
            }
        }
    }

    /// Exact probability that the argmax guess recovers a uniformly chosen token from one
    /// randomized embedding: `(1/|V|) Σ_o P[o | argmax(o)]`.
    pub fn exact_accuracy(&self) -> Result<f64> {
        let mut total = 0.0;
        self.for_each_output(|scores| {
            if scores.iter().any(|s| s.is_finite()) {
                total += scores[argmax(scores)].exp();
            }
        })?;
        Ok(total / self.vocab_size as f64)
    }

    /// Smallest and largest posterior entry over every reachable output.
    pub fn posterior_range(&self) -> Result<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        self.for_each_output(|scores| {
            if scores.iter().any(|s| s.is_finite()) {
                for p in posterior_from_scores(scores).probabilities {
                    lo = lo.min(p);
                    hi = hi.max(p);
                }
            }
        })?;
        Ok((lo, hi))
    }
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn posterior_from_scores(scores: &[f64]) -> Posterior {
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - hi).exp()).collect();
    let total: f64 = weights.iter().sum();
    Posterior {
        probabilities: weights.iter().map(|w| w / total).collect(),
        argmax: argmax(scores),
    }
}

/// Who guesses each position in the reconstruction game.
#[derive(Debug, Clone, Copy)]
pub enum Guesser<'a> {
    Bayes(&'a BayesAttacker),
    /// Uniform random token, independent of the observation.
    Uniform { vocab_size: usize },
}

/// Per-trial outcome counts of a reconstruction game.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GameReport {
    /// Correctly recovered positions per trial.
    pub correct: Vec<usize>,
    /// Prompt length per trial.
    pub lengths: Vec<usize>,
}

/// An empirical probability with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuccessEstimate {
    pub probability: f64,
    pub sigma: f64,
    pub trials: usize,
}

impl SuccessEstimate {
    pub fn from_counts(successes: usize, trials: usize) -> Self {
        let p = successes as f64 / trials as f64;
        Self {
            probability: p,
            sigma: (p * (1.0 - p) / trials as f64).sqrt(),
            trials,
        }
    }

    pub fn upper_3sigma(&self) -> f64 {
        self.probability + 3.0 * self.sigma
    }
}

impl GameReport {
    pub fn trials(&self) -> usize {
        self.correct.len()
    }

    /// Empirical `P[C/|x| ≥ ρ]`.
    pub fn success(&self, rho: f64) -> SuccessEstimate {
        let wins = self
            .correct
            .iter()
            .zip(&self.lengths)
            .filter(|(&c, &n)| c as f64 >= rho * n as f64 - 1e-9)
            .count();
        SuccessEstimate::from_counts(wins, self.trials())
    }

    /// Fraction of positions recovered, pooled over trials.
    pub fn token_accuracy(&self) -> f64 {
        let c: usize = self.correct.iter().sum();
        let n: usize = self.lengths.iter().sum();
        c as f64 / n as f64
    }
}

/// Seed of trial `trial`, derived from `base_seed`.
pub fn trial_seed(base_seed: u64, trial: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(trial);
    rng.next_u64()
}

/// Each trial builds a fresh randomized vocabulary with its own seed, observes the randomized
/// embedding of every token of prompt `trial mod |prompts|`, guesses each position
/// independently and counts the correct guesses. Trials run in parallel and are reported in
/// trial order.
pub fn reconstruction_game<B>(
    prompts: &[Vec<usize>],
    builder: B,
    guesser: Guesser<'_>,
    trials: usize,
    base_seed: u64,
) -> Result<GameReport>
where
    B: Fn(u64) -> Result<IndVocab> + Sync,
{
    if trials == 0 {
        return Err(Error::argument("trials must be >= 1"));
    }
    if prompts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if prompts.iter().any(Vec::is_empty) {
        return Err(Error::EmptySequence);
    }
    let outcomes = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let seed = trial_seed(base_seed, trial as u64);
            let ind = builder(seed)?;
            let prompt = &prompts[trial % prompts.len()];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            let mut cache: HashMap<usize, usize> = HashMap::new();
            let mut correct = 0;
            for &t in prompt {
                if t >= ind.len() {
                    return Err(Error::Index {
                        index: t,
                        size: ind.len(),
                    });
                }
                let g = match guesser {
                    Guesser::Bayes(attacker) => match cache.get(&t) {
                        Some(&g) => g,
                        None => {
                            let g = attacker.guess(ind.row(t))?;
                            cache.insert(t, g);
                            g
                        }
                    },
                    Guesser::Uniform { vocab_size } => rng.gen_range(0..vocab_size),
                };
                if g == t {
                    correct += 1;
                }
            }
            Ok((correct, prompt.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (correct, lengths) = outcomes.into_iter().unzip();
    Ok(GameReport { correct, lengths })
}

/// One matched n-gram of the frequency attack.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatch {
    pub rank: usize,
    /// Occurrences of the observed fingerprint gram.
    pub support: usize,
    /// Occurrences of the matched token gram in the public corpus.
    pub public_count: usize,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecoveredToken {
    pub prompt: usize,
    pub position: usize,
    pub token: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyAttackReport {
    pub matches: Vec<GramMatch>,
    /// One guess per (prompt, position) at most; earlier-ranked matches take precedence.
    pub recovered: Vec<RecoveredToken>,
}

#[derive(Debug, Clone)]
struct GramStats {
    count: usize,
    start_sum: usize,
    first: usize,
    occurrences: Vec<(usize, usize)>,
}

/// Gram statistics ranked by count (descending), then mean start position, then first
/// occurrence.
fn ranked_grams<K: Clone + Eq + std::hash::Hash>(sequences: &[Vec<K>], k: usize) -> Vec<(Vec<K>, GramStats)> {
    let mut stats: HashMap<Vec<K>, GramStats> = HashMap::new();
    let mut order = 0;
    for (p, seq) in sequences.iter().enumerate() {
        if seq.len() < k {
            continue;
        }
        for (start, gram) in seq.windows(k).enumerate() {
            let entry = stats.entry(gram.to_vec()).or_insert_with(|| GramStats {
                count: 0,
                start_sum: 0,
                first: order,
                occurrences: Vec::new(),
            });
            entry.count += 1;
            entry.start_sum += start;
            entry.occurrences.push((p, start));
            order += 1;
        }
    }
    let mut ranked: Vec<(Vec<K>, GramStats)> = stats.into_iter().collect();
    ranked.sort_by(|(_, a), (_, b)| {
        b.count
            .cmp(&a.count)
            .then((a.start_sum * b.count).cmp(&(b.start_sum * a.count)))
            .then(a.first.cmp(&b.first))
    });
    ranked
}

/// Rank-order matching of observed fingerprint k-grams against public token k-grams.
///
/// Each observed vector is fingerprinted by its exact bit pattern. Fingerprint k-grams and
/// public token k-grams are ranked by frequency, the i-th of one is matched to the i-th of the
/// other, and a match is kept when its observed support is at least `min_support`.
pub fn frequency_attack(
    observations: &[Vec<Vec<f32>>],
    public_corpus: &[Vec<usize>],
    k: usize,
    min_support: usize,
) -> Result<FrequencyAttackReport> {
    if k == 0 {
        return Err(Error::argument("gram length k must be >= 1"));
    }
    let mut ids: HashMap<Vec<u32>, u32> = HashMap::new();
    let fingerprinted: Vec<Vec<u32>> = observations
        .iter()
        .map(|prompt| {
            prompt
                .iter()
                .map(|v| {
                    let key: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
                    let next = ids.len() as u32;
                    *ids.entry(key).or_insert(next)
                })
                .collect()
        })
        .collect();
    let observed = ranked_grams(&fingerprinted, k);
    let public = ranked_grams(public_corpus, k);

    let mut matches = Vec::new();
    let mut taken: HashMap<(usize, usize), usize> = HashMap::new();
    for (rank, ((_, obs), (tokens, pubs))) in observed.iter().zip(&public).enumerate() {
        if obs.count < min_support {
            continue;
        }
        matches.push(GramMatch {
            rank,
            support: obs.count,
            public_count: pubs.count,
            tokens: tokens.clone(),
        });
        for &(p, start) in &obs.occurrences {
            for (offset, &t) in tokens.iter().enumerate() {
                taken.entry((p, start + offset)).or_insert(t);
            }
        }
    }
    let mut recovered: Vec<RecoveredToken> = taken
        .into_iter()
        .map(|((prompt, position), token)| RecoveredToken {
            prompt,
            position,
            token,
        })
        .collect();
    recovered.sort();
    Ok(FrequencyAttackReport { matches, recovered })
}

/// Which game is scored.
#[derive(Debug, Clone, Copy)]
pub enum AsrMode<'a> {
    Prompt,
    /// `truth_pass[r]` is the truth's test row for record `r`; `recon_pass[r][c]` is the row of
    /// reconstruction `c` of record `r`.
    Code {
        truth_pass: &'a [Vec<bool>],
        recon_pass: &'a [Vec<Vec<bool>>],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordScore {
    pub bleu: f64,
    pub rouge: f64,
    pub code_bleu: Option<f64>,
    pub fusi: Option<FusiScore>,
    pub privacy_win: bool,
    pub confidentiality_win: Option<bool>,
    /// `None` in prompt mode and when functional similarity is undefined for the record.
    pub functionality_win: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsrReport {
    pub privacy: f64,
    pub confidentiality: Option<f64>,
    /// Averaged over records whose functional similarity is defined; `None` if there are none.
    pub functionality: Option<f64>,
    pub functionality_records: usize,
    pub records: Vec<RecordScore>,
}

fn best_of(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, f64::max)
}

fn scored<S: AsRef<str>>(
    cands: &[Vec<S>],
    f: impl Fn(&[&str]) -> Result<f64>,
) -> Result<f64> {
    let mut best: f64 = 0.0;
    for c in cands {
        let c: Vec<&str> = c.iter().map(AsRef::as_ref).collect();
        if !c.is_empty() {
            best = best.max(f(&c)?);
        }
    }
    Ok(best)
}

/// Scores each record by its best reconstruction and averages the win flags.
pub fn compute_asr<S: AsRef<str>>(
    reconstructions: &[Vec<Vec<S>>],
    truths: &[Vec<S>],
    thresholds: &GameThresholds,
    mode: AsrMode<'_>,
) -> Result<AsrReport> {
    thresholds.validate()?;
    if reconstructions.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: reconstructions.len(),
            right: truths.len(),
        });
    }
    if truths.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let AsrMode::Code { truth_pass, recon_pass } = mode {
        for len in [truth_pass.len(), recon_pass.len()] {
            if len != truths.len() {
                return Err(Error::LengthMismatch {
                    left: truths.len(),
                    right: len,
                });
            }
        }
    }
    let mut records = Vec::with_capacity(truths.len());
    for (r, (cands, truth)) in reconstructions.iter().zip(truths).enumerate() {
        let truth: Vec<&str> = truth.iter().map(AsRef::as_ref).collect();
        if truth.is_empty() {
            return Err(Error::EmptySequence);
        }
        let b = scored(cands, |c| bleu(c, &truth, 1))?;
        let rg = scored(cands, |c| rouge_f1(c, &truth, 1))?;
        let privacy_win = b >= thresholds.rho_b || rg >= thresholds.rho_r;
        let mut score = RecordScore {
            bleu: b,
            rouge: rg,
            code_bleu: None,
            fusi: None,
            privacy_win,
            confidentiality_win: None,
            functionality_win: None,
        };
        if let AsrMode::Code { truth_pass, recon_pass } = mode {
            let cb = scored(cands, |c| code_bleu(c, &truth))?;
            score.code_bleu = Some(cb);
            score.confidentiality_win = Some(cb >= thresholds.rho_cb);
            let values = recon_pass[r]
                .iter()
                .map(|row| fusi(&truth_pass[r], row))
                .collect::<Result<Vec<_>>>()?;
            let f = if values.is_empty() || values.contains(&FusiScore::Undefined) {
                FusiScore::Undefined
            } else {
                FusiScore::Score(best_of(values.iter().filter_map(|v| v.value())))
            };
            score.fusi = Some(f);
            score.functionality_win = f.value().map(|v| v > thresholds.rho_f);
        }
        records.push(score);
    }
    let rate = |flags: Vec<bool>| {
        if flags.is_empty() {
            None
        } else {
            Some(flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
        }
    };
    let privacy = rate(records.iter().map(|r| r.privacy_win).collect()).unwrap_or(0.0);
    let (confidentiality, functionality, functionality_records) = match mode {
        AsrMode::Prompt => (None, None, 0),
        AsrMode::Code { .. } => {
            let func: Vec<bool> = records.iter().filter_map(|r| r.functionality_win).collect();
            let n = func.len();
            (
                rate(records.iter().filter_map(|r| r.confidentiality_win).collect()),
                rate(func),
                n,
            )
        }
    };
    Ok(AsrReport {
        privacy,
        confidentiality,
        functionality,
        functionality_records,
        records,
    })
}

impl fmt::Display for AsrReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.confidentiality.is_some() {
            writeln!(
                f,
                "# code_bleu: 0.5 * bleu(n<=2) + 0.5 * keyword-weighted unigram bleu (no syntax-tree or dataflow match)"
            )?;
        }
        writeln!(f, "records: {}", self.records.len())?;
        writeln!(f, "asr_privacy: {:.6}", self.privacy)?;
        if let Some(c) = self.confidentiality {
            writeln!(f, "asr_confidentiality: {c:.6}")?;
        }
        match self.functionality {
            Some(v) => writeln!(f, "asr_functionality: {v:.6}")?,
            None if self.confidentiality.is_some() => writeln!(f, "asr_functionality: undefined")?,
            None => {}
        }
        if self.confidentiality.is_some() {
            writeln!(f, "functionality_records: {}", self.functionality_records)?;
        }
        for (i, r) in self.records.iter().enumerate() {
            writeln!(f)?;
            writeln!(f, "record: {i}")?;
            writeln!(f, "bleu: {:.6}", r.bleu)?;
            writeln!(f, "rouge: {:.6}", r.rouge)?;
            writeln!(f, "privacy_win: {}", r.privacy_win)?;
            if let Some(cb) = r.code_bleu {
                writeln!(f, "code_bleu: {cb:.6}")?;
            }
            if let Some(w) = r.confidentiality_win {
                writeln!(f, "confidentiality_win: {w}")?;
            }
            if let Some(fu) = r.fusi {
                writeln!(f, "fusi: {fu}")?;
                match r.functionality_win {
                    Some(w) => writeln!(f, "functionality_win: {w}")?,
                    None => writeln!(f, "functionality_win: undefined")?,
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arr::build_indvocab;
    use crate::vocab::synth_vocabulary;

    fn fixture() -> Vocabulary {
        synth_vocabulary(6, 3, 42, 0.5).unwrap()
    }

    #[test]
    fn thresholds_default_and_validate() {
        let t = GameThresholds::default();
        assert_eq!((t.rho_b, t.rho_r, t.rho_f, t.rho_cb), (20.0, 0.4, 0.0, 20.0));
        assert!(t.validate().is_ok());
        assert!(GameThresholds { rho_f: 1.0, ..t }.validate().is_err());
        assert!(GameThresholds { rho_r: 1.5, ..t }.validate().is_err());
    }

    #[test]
    fn posterior_sums_to_one_and_uniform_for_identical_rows() {
        let v = fixture();
        let plan = BudgetPlan::from_per_feature(vec![1.0; 3]).unwrap();
        let attacker = BayesAttacker::new(&v, &plan, DenominatorPolicy::ExcludeSelf).unwrap();
        let ind = build_indvocab(&v, &plan, 3, DenominatorPolicy::ExcludeSelf).unwrap();
        for t in 0..6 {
            let p = attacker.posterior(ind.row(t)).unwrap();
            assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let flat = Vocabulary::new((0..4).map(|i| format!("f{i}")).collect(), vec![0.5; 8], 2).unwrap();
        let plan = BudgetPlan::from_per_feature(vec![1.0; 2]).unwrap();
        let a = BayesAttacker::new(&flat, &plan, DenominatorPolicy::ExcludeSelf).unwrap();
        let p = a.posterior(&[0.5, 0.5]).unwrap();
        assert!(p.probabilities.iter().all(|&x| (x - 0.25).abs() < 1e-12));
        assert_eq!(p.argmax, 0);
    }

    #[test]
    fn unreachable_value_is_zero_likelihood() {
        let v = fixture();
        let plan = BudgetPlan::from_per_feature(vec![1.0; 3]).unwrap();
        let a = BayesAttacker::new(&v, &plan, DenominatorPolicy::ExcludeSelf).unwrap();
        assert!(matches!(
            a.posterior(&[123.0, 0.0, 0.0]),
            Err(Error::ZeroLikelihood { feature: 0 })
        ));
        assert!(a.posterior(&[0.0]).is_err());
    }

    #[test]
    fn exact_accuracy_matches_sampling() {
        let v = fixture();
        let plan = BudgetPlan::from_per_feature(vec![1.0; 3]).unwrap();
        let a = BayesAttacker::new(&v, &plan, DenominatorPolicy::ExcludeSelf).unwrap();
        let exact = a.exact_accuracy().unwrap();
        let prompts: Vec<Vec<usize>> = (0..6).map(|t| vec![t]).collect();
        let report = reconstruction_game(
            &prompts,
            |seed| build_indvocab(&v, &plan, seed, DenominatorPolicy::ExcludeSelf),
            Guesser::Bayes(&a),
            30_000,
            5,
        )
        .unwrap();
        let p = report.token_accuracy();
        let sigma = (p * (1.0 - p) / 30_000.0).sqrt();
        assert!((p - exact).abs() < 4.0 * sigma, "{p} vs {exact}");
    }

    #[test]
    fn game_edge_cases_and_paired_dominance() {
        let v = fixture();
        let plan = BudgetPlan::from_per_feature(vec![2.0; 3]).unwrap();
        let a = BayesAttacker::new(&v, &plan, DenominatorPolicy::ExcludeSelf).unwrap();
        let prompts = vec![vec![0, 1, 2, 3, 4, 5, 0, 1]];
        let build = |seed| build_indvocab(&v, &plan, seed, DenominatorPolicy::ExcludeSelf);
        let bayes = reconstruction_game(&prompts, build, Guesser::Bayes(&a), 2000, 1).unwrap();
        assert_eq!(bayes.success(0.0).probability, 1.0);
        let uniform = reconstruction_game(&prompts, build, Guesser::Uniform { vocab_size: 6 }, 2000, 1).unwrap();
        assert!(uniform.token_accuracy() <= bayes.token_accuracy());
        assert!(reconstruction_game(&prompts, build, Guesser::Bayes(&a), 0, 1).is_err());
        let again = reconstruction_game(&prompts, build, Guesser::Bayes(&a), 2000, 1).unwrap();
        assert_eq!(again, bayes);
    }

    #[test]
    fn frequency_attack_k1_is_token_frequency_matching() {
        // Token 7 appears three times, token 8 once; observations relabel them as vectors.
        let obs = vec![vec![vec![1.0f32], vec![1.0], vec![2.0], vec![1.0]]];
        let public = vec![vec![7usize, 8, 7, 7]];
        let r = frequency_attack(&obs, &public, 1, 1).unwrap();
        assert_eq!(r.matches[0].tokens, vec![7]);
        assert_eq!(r.matches[1].tokens, vec![8]);
        assert_eq!(r.recovered.len(), 4);
        assert!(r.recovered.iter().all(|x| x.token == if x.position == 2 { 8 } else { 7 }));
        let strict = frequency_attack(&obs, &public, 1, 2).unwrap();
        assert_eq!(strict.matches.len(), 1);
        assert!(frequency_attack(&obs, &public, 0, 1).is_err());
    }

    #[test]
    fn asr_identity_and_disjoint() {
        let truths = vec![vec!["a", "b", "c", "d"]];
        let same = vec![vec![vec!["a", "b", "c", "d"]]];
        let t = GameThresholds::default();
        let pass = vec![vec![true, true]];
        let rp = vec![vec![vec![true, true]]];
        let mode = AsrMode::Code {
            truth_pass: &pass,
            recon_pass: &rp,
        };
        let r = compute_asr(&same, &truths, &t, mode).unwrap();
        assert_eq!(
            (r.privacy, r.confidentiality, r.functionality),
            (1.0, Some(1.0), Some(1.0))
        );
        let other = vec![vec![vec!["w", "x", "y", "z"]]];
        let rp0 = vec![vec![vec![false, false]]];
        let mode = AsrMode::Code {
            truth_pass: &pass,
            recon_pass: &rp0,
        };
        let r = compute_asr(&other, &truths, &t, mode).unwrap();
        assert_eq!(
            (r.privacy, r.confidentiality, r.functionality),
            (0.0, Some(0.0), Some(0.0))
        );
        assert!(compute_asr(&other, &[], &t, AsrMode::Prompt).is_err());
    }
}
