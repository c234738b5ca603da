//! Reproduction suite: every acceptance check, run against a fixture directory, with measured
//! values and runtimes.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversary::{compute_asr, frequency_attack, reconstruction_game, AsrMode, BayesAttacker, GameThresholds, Guesser};
use crate::arr::{
    arr_probabilities, build_indvocab, build_indvocab_serial, load_indvocab, measure_effective_epsilon,
    save_indvocab, BudgetPlan, DenominatorPolicy, IndVocab,
};
use crate::bounds::{brute_force_time, prompt_reconstruction_bound, token_inference_bounds, PromptBoundParams, SECONDS_PER_YEAR};
use crate::error::{Error, Result};
use crate::ltok::{self, TokenPermutation};
use crate::metrics::{bleu, fusi, pass_at_r, rouge_f1, FusiScore};
use crate::protocol::{
    loopback_pair, monolithic_oracle, payload_schema, serve_connection, stuning_round, ClientModel, ClientSession,
    ErrorCode, FieldKind, Frame, Hello, Mat, Message, Middle, ParamAck, ServerConfig, SessionMode, Tensor,
    ToyStack, FRAME_TYPES, PROTOCOL_VERSION,
};
use crate::vocab::{load_corpus, load_vocabulary, save_corpus, save_vocabulary, synth_corpus, synth_vocabulary, CorpusRecord, Vocabulary};

pub const VOCAB_FIXTURE: &str = "vocab.bin";
pub const INDVOCAB_FIXTURE: &str = "indvocab.bin";
pub const CORPUS_FIXTURE: &str = "corpus.txt";

/// Fixture vocabulary: `|V| = 6`, `m = 3`, generator seed 42, features in `[-0.5, 0.5]`.
pub const FIXTURE_VOCAB_SIZE: usize = 6;
pub const FIXTURE_DIM: usize = 3;
pub const FIXTURE_VOCAB_SEED: u64 = 42;
pub const FIXTURE_SCALE: f32 = 0.5;
/// The stored IndVocab uses `ε_i = 1` on every feature and build seed 7.
pub const FIXTURE_EPS_I: f64 = 1.0;
pub const FIXTURE_BUILD_SEED: u64 = 7;
pub const FIXTURE_CORPUS_SEED: u64 = 3;

pub const CRITERIA: usize = 11;

/// Per-feature budgets audited by the ε-IND and containment checks.
pub const AUDIT_EPS: [f64; 3] = [0.5, 1.0, 2.0];

#[derive(Debug, Clone, PartialEq)]
pub struct Fixtures {
    pub vocab: Vocabulary,
    pub indvocab: IndVocab,
    /// 20 records over the fixture vocabulary, used for split tuning.
    pub corpus: Vec<CorpusRecord>,
}

pub fn generate_fixtures() -> Result<Fixtures> {
    let vocab = synth_vocabulary(FIXTURE_VOCAB_SIZE, FIXTURE_DIM, FIXTURE_VOCAB_SEED, FIXTURE_SCALE)?;
    let plan = BudgetPlan::from_per_feature(vec![FIXTURE_EPS_I; FIXTURE_DIM])?;
    let indvocab = build_indvocab(&vocab, &plan, FIXTURE_BUILD_SEED, DenominatorPolicy::ExcludeSelf)?;
    let corpus = synth_corpus(&vocab, 20, 5, 3, FIXTURE_CORPUS_SEED);
    Ok(Fixtures {
        vocab,
        indvocab,
        corpus,
    })
}

pub fn write_fixtures(dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let fx = generate_fixtures()?;
    save_vocabulary(&fx.vocab, dir.join(VOCAB_FIXTURE))?;
    save_indvocab(&fx.indvocab, dir.join(INDVOCAB_FIXTURE))?;
    save_corpus(&fx.corpus, &fx.vocab, dir.join(CORPUS_FIXTURE))?;
    Ok(())
}

pub fn load_fixtures(dir: impl AsRef<Path>) -> Result<Fixtures> {
    let dir = dir.as_ref();
    for name in [VOCAB_FIXTURE, INDVOCAB_FIXTURE, CORPUS_FIXTURE] {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(Error::MissingFixture(path.display().to_string()));
        }
    }
    let vocab = load_vocabulary(dir.join(VOCAB_FIXTURE))?;
    let indvocab = load_indvocab(dir.join(INDVOCAB_FIXTURE))?;
    let corpus = load_corpus(dir.join(CORPUS_FIXTURE), &vocab)?;
    Ok(Fixtures {
        vocab,
        indvocab,
        corpus,
    })
}

/// One measured sub-check of a criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: String,
    pub passed: bool,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, measured: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            measured: measured.into(),
            passed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub id: usize,
    pub title: &'static str,
    pub checks: Vec<Check>,
    /// Lines reported alongside the checks without affecting the outcome.
    pub notes: Vec<String>,
    pub runtime: Duration,
    pub budget: Duration,
}

impl CriterionResult {
    pub fn within_budget(&self) -> bool {
        self.runtime <= self.budget
    }

    pub fn passed(&self) -> bool {
        self.within_budget() && self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "[{}] criterion {:>2}: {} ({:.3} s, budget {} s)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.runtime.as_secs_f64(),
            self.budget.as_secs()
        )?;
        for c in &self.checks {
            writeln!(f, "    {} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.measured)?;
        }
        for n in &self.notes {
            writeln!(f, "    note {n}")?;
        }
        if !self.within_budget() {
            writeln!(f, "    FAIL runtime over budget")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReproReport {
    pub criteria: Vec<CriterionResult>,
}

impl ReproReport {
    pub fn passed(&self) -> bool {
        self.criteria.iter().all(CriterionResult::passed)
    }

    pub fn failures(&self) -> Vec<usize> {
        self.criteria.iter().filter(|c| !c.passed()).map(|c| c.id).collect()
    }
}

impl fmt::Display for ReproReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.criteria {
            write!(f, "{c}")?;
        }
        let passed = self.criteria.iter().filter(|c| c.passed()).count();
        writeln!(f, "summary: {passed}/{} criteria passed", self.criteria.len())
    }
}

/// Loads the fixtures in `dir` and runs every criterion in order.
pub fn run_reproduction_suite(dir: impl AsRef<Path>) -> Result<ReproReport> {
    let fx = load_fixtures(dir)?;
    let criteria = (1..=CRITERIA).map(|id| run_criterion(id, &fx)).collect::<Result<Vec<_>>>()?;
    Ok(ReproReport { criteria })
}

type CriterionFn = fn(&Fixtures) -> Result<(Vec<Check>, Vec<String>)>;

pub fn run_criterion(id: usize, fx: &Fixtures) -> Result<CriterionResult> {
    let (title, budget, run): (&'static str, u64, CriterionFn) = match id {
        1 => ("exact eps-IND audit", 5, eps_ind_audit),
        2 => ("ARR normalization and dominance", 1, normalization_and_dominance),
        3 => ("posterior containment", 5, posterior_containment),
        4 => ("bound dominance by Monte Carlo", 60, bound_dominance),
        5 => ("closed-form anchors", 1, anchors),
        6 => ("LTokenizer bijection and uniformity", 30, ltokenizer),
        7 => ("metric oracles", 5, metric_oracles),
        8 => ("split vs monolithic", 120, split_vs_monolithic),
        9 => ("wire contract", 5, wire_contract),
        10 => ("frequency attack", 60, frequency_attack_criterion),
        11 => ("attacker monotonicity", 30, monotonicity),
        _ => return Err(Error::argument(format!("criteria are numbered 1..={CRITERIA}, got {id}"))),
    };
    let start = Instant::now();
    let (checks, notes) = run(fx)?;
    Ok(CriterionResult {
        id,
        title,
        checks,
        notes,
        runtime: start.elapsed(),
        budget: Duration::from_secs(budget),
    })
}

const POLICIES: [DenominatorPolicy; 2] = [DenominatorPolicy::ExcludeSelf, DenominatorPolicy::IncludeSelf];

fn uniform_plan(eps_i: f64, dim: usize) -> Result<BudgetPlan> {
    BudgetPlan::from_per_feature(vec![eps_i; dim])
}

fn eps_ind_audit(fx: &Fixtures) -> Result<(Vec<Check>, Vec<String>)> {
    let mut checks = Vec::new();
    for policy in POLICIES {
        for eps in AUDIT_EPS {
            let eff = measure_effective_epsilon(&fx.vocab, &uniform_plan(eps, fx.vocab.dim())?, policy)?;
            let worst = eff.per_feature.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            checks.push(Check::new(
                format!("{} eps_i={eps}", policy.name()),
                worst <= eps + 1e-9,
                format!(
                    "effective per-feature {:?}, max {worst:.6}, excess {:+.6}, total {:.6} vs nominal {:.6}",
                    eff.per_feature.iter().map(|v| (v * 1e6).round() / 1e6).collect::<Vec<_>>(),
                    worst - eps,
                    eff.total,
                    eps * fx.vocab.dim() as f64
                ),
            ));
        }
    }
    let audit = fx.indvocab.audit_against(&fx.vocab);
    checks.push(Check::new(
        "stored IndVocab audit",
        audit.ok(),
        format!(
            "digest_matches={} support_closed={} rebuild_matches={}",
            audit.digest_matches, audit.support_closed, audit.rebuild_matches
        ),
    ));
    let eff = measure_effective_epsilon(&fx.vocab, fx.indvocab.plan(), fx.indvocab.policy())?;
    let notes = vec![format!(
        "stored IndVocab: policy {}, nominal per-feature {:?}, effective total {:.6}",
        fx.indvocab.policy().name(),
        fx.indvocab.plan().per_feature(),
        eff.total
    )];
    Ok((checks, notes))
}

fn normalization_and_dominance(fx: &Fixtures) -> Result<(Vec<Check>, Vec<String>)> {
    let mut checks = Vec::new();
    for policy in POLICIES {
        for eps in AUDIT_EPS {
            let mut worst_sum: f64 = 0.0;
            let mut worst_margin = f64::INFINITY;
            for t in 0..fx.vocab.len() {
                for i in 0..fx.vocab.dim() {
                    let d = arr_probabilities(&fx.vocab, t, i, eps, policy)?;
                    worst_sum = worst_sum.max((d.total() - 1.0).abs());
                    worst_margin = worst_margin.min(d.keep() - d.max_replacement());
                }
            }
            checks.push(Check::new(
                format!("{} eps_i={eps}", policy.name()),
                worst_sum <= 1e-12 && worst_margin >= 0.0,
                format!("max |sum - 1| = {worst_sum:.3e}, min (p - max q) = {worst_margin:.6}"),
            ));
        }
    }
    Ok((checks, Vec::new()))
}

fn posterior_containment(fx: &Fixtures) -> Result<(Vec<Check>, Vec<String>)> {
    let mut checks = Vec::new();
    for policy in POLICIES {
        for eps in AUDIT_EPS {
            let plan = uniform_plan(eps, fx.vocab.dim())?;
            let eff = measure_effective_epsilon(&fx.vocab, &plan, policy)?;
            let bound = token_inference_bounds(eff.total, fx.vocab.len() as u64)?;
            let (lo, hi) = BayesAttacker::new(&fx.vocab, &plan, policy)?.posterior_range()?;
            checks.push(Check::new(
                format!("{} eps_i={eps}", policy.name()),
                lo >= bound.lower - 1e-9 && hi <= bound.upper + 1e-9,
                format!(
                    "posterior in [{lo:.6}, {hi:.6}] within [{:.6}, {:.6}] at effective eps {:.6}",
                    bound.lower, bound.upper, eff.total
                ),
            ));
        }
    }
    Ok((checks, Vec::new()))
}

/// Number of distinct random prompts cycled through by the game.
pub const GAME_PROMPTS: usize = 64;
pub const GAME_PROMPT_LEN: usize = 8;
pub const GAME_TRIALS: usize = 100_000;
pub const GAME_RHOS: [f64; 3] = [0.25, 0.5, 1.0];

fn bound_dominance(fx: &Fixtures) -> Result<(Vec<Check>, Vec<String>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let prompts: Vec<Vec<usize>> = (0..GAME_PROMPTS)
        .map(|_| (0..GAME_PROMPT_LEN).map(|_| rng.gen_range(0..fx.vocab.len())).collect())
        .collect();
    let policy = DenominatorPolicy::ExcludeSelf;
    let mut checks = Vec::new();
    let mut notes = Vec::new();
    for (level, eps) in AUDIT_EPS.into_iter().enumerate() {
        let plan = uniform_plan(eps, fx.vocab.dim())?;
        let eff = measure_effective_epsilon(&fx.vocab, &plan, policy)?;
        let attacker = BayesAttacker::new(&fx.vocab, &plan, policy)?;
        let report = reconstruction_game(
            &prompts,
            |seed| build_indvocab_serial(&fx.vocab, &plan, seed, policy),
            Guesser::Bayes(&attacker),
            GAME_TRIALS,
            1000 + level as u64,
        )?;
        notes.push(format!(
            "eps_i={eps}: token accuracy {:.4}, exact single-token accuracy {:.4}",
            report.token_accuracy(),
            attacker.exact_accuracy()?
        ));
        for rho in GAME_RHOS {
            let est = report.success(rho);
            let bound = prompt_reconstruction_bound(PromptBoundParams {
                epsilon: eff.total,
                vocab_size: fx.vocab.len() as u64,
                prompt_len: GAME_PROMPT_LEN,
                rho,
                gamma: 0.0,
            })?;
            checks.push(Check::new(
                format!("eps_i={eps} rho={rho}"),
                est.probability <= bound.value + 3.0 * est.sigma,
                format!(
                    "empirical {:.6} (sigma {:.2e}) vs bound {:.6e} at effective eps {:.6}, C={}",
                    est.probability, est.sigma, bound.value, eff.total, bound.correct_tokens
                ),
            ));
        }
    }
    Ok((checks, notes))
}

fn anchors(_: &Fixtures) -> Result<(Vec<Check>, Vec<String>)> {
    let mut checks = Vec::new();
    for rho in [0.2, 0.4] {
        let b = prompt_reconstruction_bound(PromptBoundParams {
            epsilon: 13.0,
            vocab_size: 151_000,
            prompt_len: 200,
            rho,
            gamma: 0.146,
        })?;
        checks.push(Check::new(
            format!("prompt bound eps=13 |V|=151000 |x|=200 gamma=0.146 rho={rho}"),
            !b.vacuous && b.value < 5.5e-11,
            format!("{:.6e} (C={})", b.value, b.correct_tokens),
        ));
    }
    let years = brute_force_time(26f64.powi(-8), 1.0)?;
    checks.push(Check::new(
        "brute force 26^-8 at 1 guess/s",
        (years.expected_years - 3308.65).abs() <= 0.1,
        format!("{:.4} expected years (without the 1/2 factor {:.4})", years.expected_years, years.worst_case_years),
    ));
    let big = 26f64.powi(72) / SECONDS_PER_YEAR;
    checks.push(Check::new(
        "26^72 / seconds per year",
        (big / 2.4e94 - 1.0).abs() < 0.01,
        format!("{big:.6e} years"),
    ));
    let half = brute_force_time(26f64.powi(-72), 1.0)?;
    let notes = vec![format!(
        "with the 1/2 expected-time factor 26^72 gives {:.6e} years; without it {:.6e}",
        half.expected_years, half.worst_case_years
    )];
    Ok((checks, notes))
}

pub const LTOK_SEEDS: u64 = 100;
pub const LTOK_SEQUENCES: usize = 1000;
pub const CHI_SQUARE_SEEDS: u64 = 100_000;

fn ltokenizer(_: &Fixtures) -> Result<(Vec<Check>, Vec<String>)> {
    let vocab = synth_vocabulary(64, 2, 5, 1.0)?;
    let mut bijective = true;
    let mut round_trips = 0usize;
    let mut failures = 0usize;
    for seed in 0..LTOK_SEEDS {
        let perm = TokenPermutation::generate(vocab.len(), seed)?;
        let mut seen = vec![false; vocab.len()];
        for t in 0..vocab.len() {
            let l = perm.forward(t)?;
            bijective &= !seen[l] && perm.inverse(l)? == t;
            seen[l] = true;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
        for _ in 0..LTOK_SEQUENCES {
            let len = rng.gen_range(1..=32);
            let seq: Vec<&str> = (0..len)
                .map(|_| vocab.tokens()[rng.gen_range(0..vocab.len())].as_str())
                .collect();
            let local = ltok::encode(&seq, &perm, &vocab)?;
            let back = ltok::decode(&local, &perm, &vocab)?;
            if back.iter().map(String::as_str).eq(seq.iter().copied()) {
                round_trips += 1;
            } else {
                failures += 1;
            }
        }
    }
    let mut checks = vec![
        Check::new("forward is a bijection for every seed", bijective, format!("{LTOK_SEEDS} seeds")),
        Check::new(
            "encode/decode round trip",
            failures == 0,
            format!("{round_trips} round trips, {failures} failures"),
        ),
    ];
    let n = 4;
    let mut counts = vec![vec![0u64; n]; n];
    for seed in 0..CHI_SQUARE_SEEDS {
        let perm = TokenPermutation::generate(n, seed)?;
        for (t, row) in counts.iter_mut().enumerate() {
            row[perm.forward(t)?] += 1;
        }
    }
    let expected = CHI_SQUARE_SEEDS as f64 / n as f64;
    let chi2: f64 = counts
        .iter()
        .flatten()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // Rows and columns of a permutation table each sum to the seed count.
    let dof = ((n - 1) * (n - 1)) as f64;
    let threshold = dof + 3.0 * (2.0 * dof).sqrt();
    checks.push(Check::new(
        "index uniformity |V|=4",
        chi2 <= threshold,
        format!("chi-square {chi2:.3} on {dof} dof, 3-sigma threshold {threshold:.3}"),
    ));
    Ok((checks, Vec::new()))
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// `P[at least one correct in a uniform r-subset]` by listing every subset.
fn pass_at_r_by_enumeration(n: usize, c: usize, r: usize) -> BigRational {
    let mut hits = 0i64;
    let mut total = 0i64;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize == r {
            total += 1;
            if (0..c).any(|i| mask & (1 << i) != 0) {
                hits += 1;
            }
        }
    }
    BigRational::new(BigInt::from(hits), BigInt::from(total))
}

fn metric_oracles(_: &Fixtures) -> Result<(Vec<Check>, Vec<String>)> {
    let mut checks = Vec::new();
    let reference = words("a b c d");
    let hand: [(&str, usize, f64); 4] = [
        ("a b c d", 1, 100.0),
        ("a b x y", 1, 50.0),
        ("a a a a", 1, 25.0),
        ("w x y z", 1, 0.0),
    ];
    for (cand, n, want) in hand {
        let got = bleu(&words(cand), &reference, n)?;
        checks.push(Check::new(
            format!("bleu-{n} '{cand}' vs 'a b c d'"),
            (got - want).abs() < 1e-9,
            format!("{got:.6} (hand {want})"),
        ));
    }
    let got = bleu(&words("a b c d"), &words("a b x d"), 2)?;
    checks.push(Check::new(
        "bleu-2 'a b c d' vs 'a b x d'",
        (got - 100.0 / 3.0).abs() < 1e-9,
        format!("{got:.6} (hand 33.333333)"),
    ));
    let got = bleu(&words("a b"), &reference, 1)?;
    let want = 100.0 * (1.0f64 - 2.0).exp();
    checks.push(Check::new(
        "bleu-1 brevity 'a b' vs 'a b c d'",
        (got - want).abs() < 1e-9,
        format!("{got:.6} (hand {want:.6})"),
    ));
    for (cand, want) in [("a b c d", 1.0), ("a b", 2.0 / 3.0), ("a b x y", 0.5), ("w x y z", 0.0)] {
        let got = rouge_f1(&words(cand), &reference, 1)?;
        checks.push(Check::new(
            format!("rouge-1 '{cand}' vs 'a b c d'"),
            (got - want).abs() < 1e-12,
            format!("{got:.6} (hand {want:.6})"),
        ));
    }

    let exact = pass_at_r(6, 2, 3)?;
    let oracle = pass_at_r_by_enumeration(6, 2, 3);
    checks.push(Check::new(
        "pass@r(6, 2, 3) vs subset enumeration",
        exact.exact == oracle,
        format!("{} = {:.6} (enumeration {oracle})", exact.exact, exact.value),
    ));

    let fusi_cases: [(&[bool], &[bool], Option<f64>); 4] = [
        (&[true, true, true], &[true, true, true], Some(1.0)),
        (&[true, true, true], &[true, false, true], Some(2.0 / 3.0)),
        (&[true, false, true, true], &[false, true, false, false], Some(0.0)),
        (&[false, false], &[true, true], None),
    ];
    for (truth, recon, want) in fusi_cases {
        let got = fusi(truth, recon)?;
        let ok = match (got, want) {
            (FusiScore::Score(g), Some(w)) => (g - w).abs() < 1e-12,
            (FusiScore::Undefined, None) => true,
            _ => false,
        };
        checks.push(Check::new(format!("fusi {truth:?} / {recon:?}"), ok, got.to_string()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let len = rng.gen_range(1..=20);
        let x: Vec<u8> = (0..len).map(|_| rng.gen_range(0..6)).collect();
        let y: Vec<u8> = (0..len).map(|_| rng.gen_range(0..6)).collect();
        let mut counts: HashMap<u8, i64> = HashMap::new();
        for t in &x {
            *counts.entry(*t).or_default() += 1;
        }
        let mut overlap = 0;
        for t in &y {
            let c = counts.entry(*t).or_default();
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
        let got = rouge_f1(&y, &x, 1)?;
        worst = worst.max((got - overlap as f64 / len as f64).abs());
    }
    checks.push(Check::new(
        "rouge-1 F1 equals C/|x| on 100 equal-length pairs",
        worst < 1e-12,
        format!("max deviation {worst:.3e}"),
    ));
    Ok((checks, Vec::new()))
}

fn embed(ind: &IndVocab, seq: &[usize]) -> Result<Mat> {
    Mat::from_vec(
        seq.len(),
        ind.dim(),
        seq.iter().flat_map(|&t| ind.row(t).iter().map(|&v| v as f64)).collect(),
    )
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

fn with_server<T>(
    middle: Middle,
    model: &ClientModel,
    mode: SessionMode,
    lora: bool,
    f: impl FnOnce(&mut ClientSession<crate::protocol::PipeEnd>) -> Result<T>,
) -> Result<T> {
    let (client, mut server) = loopback_pair();
    let config = ServerConfig::new(middle);
    let handle = thread::spawn(move || serve_connection(&mut server, &config));
    let mut session = ClientSession::connect(client, mode, model, lora)?;
    let out = f(&mut session)?;
    session.close()?;
    handle
        .join()
        .map_err(|_| Error::format("server thread panicked"))??;
    Ok(out)
}

fn training_targets(record: &CorpusRecord, perm: &TokenPermutation) -> Result<(Vec<usize>, Vec<usize>)> {
    let seq: Vec<usize> = record.prompt.iter().chain(&record.code).copied().collect();
    let targets = seq[1..].iter().map(|&t| perm.forward(t)).collect::<Result<Vec<_>>>()?;
    Ok((seq, targets))
}

fn split_vs_monolithic(fx: &Fixtures) -> Result<(Vec<Check>, Vec<String>)> {
    let perm = TokenPermutation::generate(fx.vocab.len(), 11)?;
    let (m, d, v) = (fx.vocab.dim(), 8, fx.vocab.len());
    let mut checks = Vec::new();

    let mut worst_inference: f64 = 0.0;
    let mut worst_gradient: f64 = 0.0;
    for seed in 0..25u64 {
        let stack = ToyStack::random(m, d, v, "affine", 2, 1000 + seed)?;
        let seq = &fx.corpus[seed as usize % fx.corpus.len()].prompt;
        let fused = monolithic_oracle(&stack, &embed(&fx.indvocab, seq)?, None)?;
        let split = with_server(stack.middle.clone(), &stack.client, SessionMode::Inference, false, |s| {
            let e = stack.client.encode(&embed(&fx.indvocab, seq)?)?;
            let enriched = s.enrich(&e)?;
            Ok(stack.client.decode(&enriched)?.h.last().cloned().expect("decoder output"))
        })?;
        worst_inference = worst_inference.max(rel(&split.data, &fused.logits.data));

        let batch = &fx.corpus[..4];
        let mut model = stack.client.clone();
        let report = with_server(stack.middle.clone(), &stack.client, SessionMode::Tuning, true, |s| {
            stuning_round(batch, &fx.indvocab, &perm, &mut model, s, 0.0)
        })?;
        let mut avg = vec![0.0; report.grads.flat().len()];
        for (record, exchange) in batch.iter().zip(&report.records) {
            let (seq, targets) = training_targets(record, &perm)?;
            let fused = monolithic_oracle(&stack, &embed(&fx.indvocab, &seq)?, Some(&targets))?;
            let g = fused.grads.expect("gradients requested");
            for (a, b) in [(&exchange.grad_down, &g.d_enriched), (&exchange.grad_up, &g.d_emb)] {
                worst_gradient = worst_gradient.max(rel(&a.data, &b.data));
            }
            for (acc, x) in avg.iter_mut().zip(g.client.flat()) {
                *acc += x / batch.len() as f64;
            }
        }
        worst_gradient = worst_gradient.max(rel(&report.grads.flat(), &avg));
    }
    checks.push(Check::new(
        "inference logits, 25 affine stacks",
        worst_inference < 1e-6,
        format!("worst relative deviation {worst_inference:.3e}"),
    ));
    checks.push(Check::new(
        "tuning boundary and client gradients, 25 affine stacks",
        worst_gradient < 1e-6,
        format!("worst relative deviation {worst_gradient:.3e}"),
    ));

    let mut worst_fd: f64 = 0.0;
    for seed in 0..5u64 {
        worst_fd = worst_fd.max(finite_difference(fx, &perm, seed)?);
    }
    checks.push(Check::new(
        "attention gradients vs central differences",
        worst_fd < 1e-3,
        format!("worst relative deviation {worst_fd:.3e} over 5 stacks x 10 directions"),
    ));

    let stack = ToyStack::random(m, d, v, "affine", 2, 9)?;
    let mut model = stack.client.clone();
    let losses = with_server(stack.middle.clone(), &stack.client, SessionMode::Tuning, true, |s| {
        (0..200)
            .map(|_| Ok(stuning_round(&fx.corpus, &fx.indvocab, &perm, &mut model, s, 0.05)?.loss))
            .collect::<Result<Vec<f64>>>()
    })?;
    let violations = (0..losses.len() - 50).filter(|&t| losses[t + 50] >= losses[t]).count();
    checks.push(Check::new(
        "200-round tuning, every 50-round window decreases",
        violations == 0,
        format!(
            "loss {:.6} -> {:.6}, {violations} non-decreasing windows",
            losses[0],
            losses[losses.len() - 1]
        ),
    ));
    Ok((checks, Vec::new()))
}

fn finite_difference(fx: &Fixtures, perm: &TokenPermutation, seed: u64) -> Result<f64> {
    let stack = ToyStack::random(fx.vocab.dim(), 6, fx.vocab.len(), "attention", 2, seed)?;
    let seq = [2usize, 0, 4, 4, 1, 3];
    let targets = seq[1..].iter().map(|&t| perm.forward(t)).collect::<Result<Vec<_>>>()?;
    let x = embed(&fx.indvocab, &seq)?;
    let g = monolithic_oracle(&stack, &x, Some(&targets))?.grads.expect("gradients requested");
    let lora_g = g.lora.as_ref().expect("adapter present");
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let lora = stack.middle.lora.as_ref().expect("adapter present");
        let mut dir = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let (de, du, dv) = (dir(stack.client.enc_w.data.len()), dir(lora.u.data.len()), dir(lora.v.data.len()));
        let loss_at = |sign: f64| -> Result<f64> {
            let mut s = stack.clone();
            s.client.enc_w.data.iter_mut().zip(&de).for_each(|(w, d)| *w += sign * h * d);
            let l = s.middle.lora.as_mut().expect("adapter present");
            l.u.data.iter_mut().zip(&du).for_each(|(w, d)| *w += sign * h * d);
            l.v.data.iter_mut().zip(&dv).for_each(|(w, d)| *w += sign * h * d);
            Ok(monolithic_oracle(&s, &x, Some(&targets))?.loss.expect("loss requested"))
        };
        let numeric = (loss_at(1.0)? - loss_at(-1.0)?) / (2.0 * h);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let analytic = dot(&g.client.enc_w.data, &de) + dot(&lora_g.u.data, &du) + dot(&lora_g.v.data, &dv);
        worst = worst.max((numeric - analytic).abs() / analytic.abs().max(1e-8));
    }
    Ok(worst)
}

fn wire_contract(fx: &Fixtures) -> Result<(Vec<Check>, Vec<String>)> {
    let mut checks = Vec::new();
    let hello = Hello {
        version: PROTOCOL_VERSION,
        mode: SessionMode::Tuning,
        m: 3,
        d: 8,
        vocab_size: 6,
        lora_enabled: true,
    };
    let t = Tensor::new(2, 3, vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25, -7.0, 1e-30])?;
    let samples = vec![
        Message::Hello(hello),
        Message::HelloAck(hello),
        Message::Emb(t.clone()),
        Message::Enriched(t.clone()),
        Message::GradDown(t.clone()),
        Message::GradUp(t),
        Message::ParamAck(ParamAck {
            learning_rate: 0.05,
            count: 20,
        }),
        Message::Error(ErrorCode::Seq),
        Message::Bye,
    ];
    let mut round_trips = 0;
    for msg in &samples {
        let bytes = msg.to_frame(0xDEAD_BEEF).encode()?;
        let frame = Frame::decode(&bytes)?;
        if frame.encode()? == bytes && Message::from_frame(&frame)? == *msg {
            round_trips += 1;
        }
    }
    checks.push(Check::new(
        "frame round trips are bitwise",
        round_trips == samples.len(),
        format!("{round_trips}/{} frame types", samples.len()),
    ));

    for (n, d) in [(1usize, 4usize), (16, 8), (128, 32)] {
        let t = Tensor::new(n, d, vec![0.25; n * d])?;
        let emb = Message::Emb(t.clone()).payload().len();
        let enriched = Message::Enriched(t).payload().len();
        checks.push(Check::new(
            format!("EMB/ENRICHED payload n={n} d={d}"),
            emb == 8 + 4 * n * d && enriched == emb,
            format!("{emb} bytes (8 + 4nd = {})", 8 + 4 * n * d),
        ));
    }

    let stack = ToyStack::random(3, 8, 6, "affine", 2, 5)?;
    let (client, mut server) = loopback_pair();
    let config = ServerConfig::new(stack.middle);
    let handle = thread::spawn(move || serve_connection(&mut server, &config));
    let reply = ClientSession::connect(client, SessionMode::Tuning, &stack.client, true).and_then(|mut s| {
        let grad = Message::GradDown(Tensor::new(2, 8, vec![0.0; 16])?).to_frame(s.session_id());
        s.send_raw(&grad)
    });
    let end = handle.join().map_err(|_| Error::format("server thread panicked"))?;
    let ok = matches!(reply, Ok(Some(Message::Error(ErrorCode::Seq))))
        && matches!(end, Ok(crate::protocol::SessionEnd::Rejected(ErrorCode::Seq)));
    checks.push(Check::new(
        "GRAD_DOWN before EMB",
        ok,
        match &reply {
            Ok(m) => format!("{m:?}"),
            Err(e) => e.to_string(),
        },
    ));

    let numeric_only = FRAME_TYPES.iter().all(|&ft| {
        payload_schema(ft)
            .iter()
            .all(|k| matches!(k, FieldKind::U8 | FieldKind::U16 | FieldKind::U32 | FieldKind::F64 | FieldKind::HiddenTensor))
    });
    let perm_bytes = TokenPermutation::generate(6, 1)?.to_bytes();
    let ind_bytes = fx.indvocab.to_bytes();
    let token_bytes = fx.vocab.tokens().join(" ").into_bytes();
    let mut smuggled = 0;
    for msg in &samples {
        for extra in [&perm_bytes, &ind_bytes, &token_bytes] {
            let mut payload = msg.payload();
            payload.extend_from_slice(extra);
            let frame = Frame::new(msg.frame_type(), 1, payload);
            if Message::from_frame(&frame).is_ok() {
                smuggled += 1;
            }
        }
    }
    checks.push(Check::new(
        "no frame type carries permutation, IndVocab or token strings",
        numeric_only && smuggled == 0,
        format!(
            "{} frame types with numeric/hidden-tensor schemas only: {numeric_only}; payloads with appended secrets accepted: {smuggled}",
            FRAME_TYPES.len()
        ),
    ));
    Ok((checks, Vec::new()))
}

/// Frequency-attack fixture: every prompt starts with the same template and continues with a
/// random body.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateCorpus {
    pub template: Vec<usize>,
    pub body_tokens: Vec<usize>,
    pub prompts: Vec<Vec<usize>>,
}

/// Bodies draw from `body_tokens`; with `top_share = Some(p)` the first body token has
/// probability `p` and the rest share the remainder uniformly.
pub fn template_corpus(
    template: &[usize],
    body_tokens: &[usize],
    prompts: usize,
    body_len: usize,
    top_share: Option<f64>,
    seed: u64,
) -> Result<TemplateCorpus> {
    if body_tokens.len() < 2 || prompts == 0 {
        return Err(Error::argument("need at least two body tokens and one prompt"));
    }
    if let Some(p) = top_share {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::argument(format!("top share must be in [0, 1], got {p}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompts = (0..prompts)
        .map(|_| {
            let body = (0..body_len).map(|_| match top_share {
                Some(p) if rng.gen_bool(p) => body_tokens[0],
                Some(_) => body_tokens[rng.gen_range(1..body_tokens.len())],
                None => body_tokens[rng.gen_range(0..body_tokens.len())],
            });
            template.iter().copied().chain(body).collect::<Vec<usize>>()
        })
        .collect();
    Ok(TemplateCorpus {
        template: template.to_vec(),
        body_tokens: body_tokens.to_vec(),
        prompts,
    })
}

/// What the cloud sees for each prompt position after the client encoder, quantized as on the
/// wire.
pub fn encoder_observations(prompts: &[Vec<usize>], ind: &IndVocab, model: &ClientModel) -> Result<Vec<Vec<Vec<f32>>>> {
    prompts
        .iter()
        .map(|p| {
            let e = model.encode(&embed(ind, p)?)?;
            Ok((0..e.rows).map(|j| e.row(j).iter().map(|&v| v as f32).collect()).collect())
        })
        .collect()
}

pub fn raw_observations(prompts: &[Vec<usize>], ind: &IndVocab) -> Vec<Vec<Vec<f32>>> {
    prompts
        .iter()
        .map(|p| p.iter().map(|&t| ind.row(t).to_vec()).collect())
        .collect()
}

pub const FREQ_PROMPTS: usize = 200;
pub const FREQ_TEMPLATE_LEN: usize = 5;
pub const FREQ_BODY_LEN: usize = 10;
pub const FREQ_BODY_TOKENS: usize = 200;
pub const FREQ_K: usize = 3;
pub const FREQ_MIN_SUPPORT: usize = 10;
pub const FREQ_TOP_SHARE: f64 = 0.6;

fn frequency_attack_criterion(_: &Fixtures) -> Result<(Vec<Check>, Vec<String>)> {
    let vocab = synth_vocabulary(FREQ_TEMPLATE_LEN + FREQ_BODY_TOKENS, 8, 17, 1.0)?;
    let plan = uniform_plan(2.0, vocab.dim())?;
    let ind = build_indvocab(&vocab, &plan, 23, DenominatorPolicy::ExcludeSelf)?;
    let template: Vec<usize> = (0..FREQ_TEMPLATE_LEN).collect();
    let body: Vec<usize> = (FREQ_TEMPLATE_LEN..vocab.len()).collect();
    let mut checks = Vec::new();
    let mut notes = Vec::new();

    let private = template_corpus(&template, &body, FREQ_PROMPTS, FREQ_BODY_LEN, None, 31)?;
    let public = template_corpus(&template, &body, FREQ_PROMPTS, FREQ_BODY_LEN, None, 32)?;
    let model = ClientModel::random(vocab.dim(), 8, vocab.len(), 41)?;
    let obs = encoder_observations(&private.prompts, &ind, &model)?;
    let report = frequency_attack(&obs, &public.prompts, FREQ_K, FREQ_MIN_SUPPORT)?;
    let (template_hits, body_hits, wrong) = score_recovery(&report.recovered, &private.prompts);
    checks.push(Check::new(
        "with encoder: recovered positions are template positions",
        template_hits > 0 && body_hits == 0 && wrong == 0,
        format!(
            "{} matched grams, {template_hits} correct template tokens, {body_hits} body tokens, {wrong} wrong",
            report.matches.len()
        ),
    ));
    let truths: Vec<Vec<String>> = private
        .prompts
        .iter()
        .map(|p| names(&vocab, &p[FREQ_TEMPLATE_LEN..]))
        .collect();
    let recon: Vec<Vec<Vec<String>>> = (0..private.prompts.len())
        .map(|p| {
            let tokens: Vec<usize> = report
                .recovered
                .iter()
                .filter(|r| r.prompt == p && r.position >= FREQ_TEMPLATE_LEN)
                .map(|r| r.token)
                .collect();
            vec![names(&vocab, &tokens)]
        })
        .collect();
    let asr = compute_asr(&recon, &truths, &GameThresholds::default(), AsrMode::Prompt)?;
    checks.push(Check::new(
        "with encoder: privacy ASR after excluding the template",
        asr.privacy == 0.0,
        format!("{:.6}", asr.privacy),
    ));

    let skewed = template_corpus(&template, &body, FREQ_PROMPTS, FREQ_BODY_LEN, Some(FREQ_TOP_SHARE), 33)?;
    let skewed_public = template_corpus(&template, &body, FREQ_PROMPTS, FREQ_BODY_LEN, Some(FREQ_TOP_SHARE), 34)?;
    let control = frequency_attack(&raw_observations(&skewed.prompts, &ind), &skewed_public.prompts, FREQ_K, FREQ_MIN_SUPPORT)?;
    let (c_template, c_body, c_wrong) = score_recovery(&control.recovered, &skewed.prompts);
    checks.push(Check::new(
        "without encoder: high-frequency body tokens recovered",
        c_body >= 1,
        format!("{c_body} correct body tokens, {c_template} correct template tokens, {c_wrong} wrong"),
    ));
    let mixed = frequency_attack(&encoder_observations(&skewed.prompts, &ind, &model)?, &skewed_public.prompts, FREQ_K, FREQ_MIN_SUPPORT)?;
    let (m_template, m_body, m_wrong) = score_recovery(&mixed.recovered, &skewed.prompts);
    notes.push(format!(
        "skewed bodies with encoder: {m_body} correct body tokens, {m_template} correct template tokens, {m_wrong} wrong"
    ));
    Ok((checks, notes))
}

fn names(vocab: &Vocabulary, tokens: &[usize]) -> Vec<String> {
    tokens.iter().map(|&t| vocab.tokens()[t].clone()).collect()
}

/// (correct template-position guesses, correct body-position guesses, wrong guesses).
fn score_recovery(recovered: &[crate::adversary::RecoveredToken], prompts: &[Vec<usize>]) -> (usize, usize, usize) {
    let mut out = (0, 0, 0);
    for r in recovered {
        if prompts[r.prompt][r.position] != r.token {
            out.2 += 1;
        } else if r.position < FREQ_TEMPLATE_LEN {
            out.0 += 1;
        } else {
            out.1 += 1;
        }
    }
    out
}

pub const MONOTONICITY_EPS: [f64; 5] = [0.5, 1.0, 2.0, 5.0, 20.0];

fn monotonicity(fx: &Fixtures) -> Result<(Vec<Check>, Vec<String>)> {
    let mut checks = Vec::new();
    for policy in POLICIES {
        let acc = MONOTONICITY_EPS
            .iter()
            .map(|&e| BayesAttacker::new(&fx.vocab, &uniform_plan(e, fx.vocab.dim())?, policy)?.exact_accuracy())
            .collect::<Result<Vec<f64>>>()?;
        let monotone = acc.windows(2).all(|w| w[1] >= w[0] - 1e-12);
        checks.push(Check::new(
            format!("{} accuracy non-decreasing over eps_i {MONOTONICITY_EPS:?}", policy.name()),
            monotone,
            format!("{:?}", acc.iter().map(|a| (a * 1e6).round() / 1e6).collect::<Vec<_>>()),
        ));
        let top = BayesAttacker::new(&fx.vocab, &uniform_plan(50.0, fx.vocab.dim())?, policy)?.exact_accuracy()?;
        checks.push(Check::new(
            format!("{} accuracy at eps_i=50", policy.name()),
            top > 0.99,
            format!("{top:.9}"),
        ));
    }
    Ok((checks, Vec::new()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_fixture_is_reported() {
        let dir = std::env::temp_dir().join(format!("noir-repro-missing-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        assert!(matches!(load_fixtures(&dir), Err(Error::MissingFixture(_))));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn fixtures_round_trip() {
        let dir = std::env::temp_dir().join(format!("noir-repro-fixtures-{}", std::process::id()));
        write_fixtures(&dir).unwrap();
        assert_eq!(load_fixtures(&dir).unwrap(), generate_fixtures().unwrap());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn pass_at_r_enumeration_small_cases() {
        assert_eq!(pass_at_r_by_enumeration(4, 0, 2), BigRational::from_integer(0.into()));
        assert_eq!(pass_at_r_by_enumeration(4, 4, 2), BigRational::from_integer(1.into()));
        assert_eq!(
            pass_at_r_by_enumeration(6, 2, 3),
            BigRational::new(4.into(), 5.into())
        );
    }

    #[test]
    fn template_corpus_shapes() {
        let c = template_corpus(&[0, 1], &[2, 3, 4], 5, 4, Some(1.0), 1).unwrap();
        assert!(c.prompts.iter().all(|p| p == &vec![0, 1, 2, 2, 2, 2]));
        assert!(template_corpus(&[0], &[1], 5, 4, None, 1).is_err());
    }

    #[test]
    fn unknown_criterion_is_an_argument_error() {
        let fx = generate_fixtures().unwrap();
        assert!(matches!(run_criterion(0, &fx), Err(Error::Argument(_))));
        assert!(matches!(run_criterion(12, &fx), Err(Error::Argument(_))));
    }
}
