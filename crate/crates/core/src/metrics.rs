//! Similarity, functionality and perturbation metrics.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::hash::Hash;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::arr::IndVocab;
use crate::error::{Error, Result};
use crate::vocab::{CorpusRecord, Vocabulary};

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for gram in seq.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_overlap<T: Eq + Hash>(cand: &HashMap<&[T], usize>, reference: &HashMap<&[T], usize>) -> usize {
    cand.iter()
        .map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0)))
        .sum()
}

fn check_order(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::argument("n-gram order must be >= 1"));
    }
    Ok(())
}

fn check_nonempty<T>(cand: &[T], reference: &[T]) -> Result<()> {
    if cand.is_empty() || reference.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(())
}

/// `exp(1 - |ref|/|cand|)` when the candidate is shorter, else 1.
pub fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len >= ref_len {
        1.0
    } else if cand_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

/// Clipped precision of order `n` alone, as a fraction.
fn modified_precision<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> f64 {
    let c = ngram_counts(cand, n);
    let total: usize = c.values().sum();
    if total == 0 {
        return 0.0;
    }
    clipped_overlap(&c, &ngram_counts(reference, n)) as f64 / total as f64
}

/// Modified n-gram precision of order `n` times the brevity penalty, on a 0-100 scale.
pub fn bleu<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> Result<f64> {
    check_order(n)?;
    check_nonempty(cand, reference)?;
    Ok(100.0 * modified_precision(cand, reference, n) * brevity_penalty(cand.len(), reference.len()))
}

/// Geometric mean of the modified precisions of orders `1..=max_n`, times the brevity penalty.
pub fn bleu_cumulative<T: Eq + Hash>(cand: &[T], reference: &[T], max_n: usize) -> Result<f64> {
    check_order(max_n)?;
    check_nonempty(cand, reference)?;
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let p = modified_precision(cand, reference, n);
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    Ok(100.0 * (log_sum / max_n as f64).exp() * brevity_penalty(cand.len(), reference.len()))
}

pub const PYTHON_KEYWORDS: &[&str] = &[
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class", "continue", "def",
    "del", "elif", "else", "except", "finally", "for", "from", "global", "if", "import", "in", "is",
    "lambda", "nonlocal", "not", "or", "pass", "raise", "return", "try", "while", "with", "yield",
];

pub const KEYWORD_WEIGHT: f64 = 5.0;

/// Unigram precision where language keywords count `KEYWORD_WEIGHT` times, times the brevity
/// penalty, on a 0-100 scale.
pub fn keyword_weighted_bleu<S: AsRef<str>>(cand: &[S], reference: &[S]) -> Result<f64> {
    check_nonempty(cand, reference)?;
    let c: Vec<&str> = cand.iter().map(AsRef::as_ref).collect();
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let cc = ngram_counts(&c, 1);
    let rc = ngram_counts(&r, 1);
    let weight = |g: &[&str]| if PYTHON_KEYWORDS.contains(&g[0]) { KEYWORD_WEIGHT } else { 1.0 };
    let mut num = 0.0;
    let mut den = 0.0;
    for (g, &count) in &cc {
        let w = weight(g);
        den += w * count as f64;
        num += w * count.min(rc.get(g).copied().unwrap_or(0)) as f64;
    }
    Ok(100.0 * num / den * brevity_penalty(c.len(), r.len()))
}

/// Simplified CodeBleu: `0.5 · Bleu(n ≤ 2) + 0.5 · keyword-weighted unigram Bleu`.
/// Syntax-tree and dataflow matching are not included.
pub fn code_bleu<S: AsRef<str>>(cand: &[S], reference: &[S]) -> Result<f64> {
    let c: Vec<&str> = cand.iter().map(AsRef::as_ref).collect();
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    Ok(0.5 * bleu_cumulative(&c, &r, 2)? + 0.5 * keyword_weighted_bleu(&c, &r)?)
}

/// F1 of n-gram multiset precision and recall, in `[0, 1]`.
pub fn rouge_f1<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> Result<f64> {
    check_order(n)?;
    check_nonempty(cand, reference)?;
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let overlap = clipped_overlap(&c, &r) as f64;
    if overlap == 0.0 {
        return Ok(0.0);
    }
    let precision = overlap / c.values().sum::<usize>() as f64;
    let recall = overlap / r.values().sum::<usize>() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Fraction of truth tokens recovered, counting repeated tokens as many times as both contain them.
pub fn crt<T: Eq + Hash>(truth: &[T], recon: &[T]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::EmptySequence);
    }
    let overlap = clipped_overlap(&ngram_counts(truth, 1), &ngram_counts(recon, 1));
    Ok(overlap as f64 / truth.len() as f64)
}

fn identifier_tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty() && !w.starts_with(|c: char| c.is_ascii_digit()))
}

fn is_identifier(word: &str) -> bool {
    let mut chars = word.chars();
    matches!(chars.next(), Some(c) if c.is_alphabetic() || c == '_')
        && chars.all(|c| c.is_alphanumeric() || c == '_')
}

/// Imported names, defined function names and assignment targets of Python-like code.
pub fn sensitive_identifiers(code: &str) -> Vec<String> {
    let mut found: Vec<String> = Vec::new();
    let mut push = |w: &str| {
        if is_identifier(w) && !PYTHON_KEYWORDS.contains(&w) && !found.iter().any(|f| f == w) {
            found.push(w.to_string());
        }
    };
    for line in code.lines() {
        let line = line.trim();
        if line.starts_with("import ") || line.starts_with("from ") {
            identifier_tokens(line).for_each(&mut push);
        } else if let Some(rest) = line.strip_prefix("def ") {
            if let Some(name) = rest.split('(').next() {
                push(name.trim());
            }
        } else if let Some(lhs) = assignment_lhs(line) {
            for target in lhs.split(',') {
                let target = target.trim().trim_start_matches('(').trim_end_matches(')').trim();
                let target = target.split(':').next().unwrap_or("").trim();
                push(target);
            }
        }
    }
    found
}

/// Left-hand side of `a = ...`, `a, b = ...` or `a += ...`; `None` for comparisons and other lines.
fn assignment_lhs(line: &str) -> Option<&str> {
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            b'=' => {
                let next_eq = bytes.get(i + 1) == Some(&b'=');
                let prev = if i > 0 { bytes[i - 1] } else { b' ' };
                if next_eq || matches!(prev, b'=' | b'!' | b'<' | b'>') {
                    return None;
                }
                let lhs = line[..i].trim_end_matches(|c: char| "+-*/%&|^@".contains(c));
                return Some(lhs);
            }
            b'(' | b'[' | b'"' | b'\'' | b'#' => return None,
            _ => {}
        }
    }
    None
}

/// True iff any sensitive identifier of the truth appears as a whole token in the reconstruction.
pub fn leak(truth_code: &str, recon_code: &str) -> bool {
    let recon: HashSet<&str> = identifier_tokens(recon_code).collect();
    sensitive_identifiers(truth_code)
        .iter()
        .any(|id| recon.contains(id.as_str()))
}

/// Functional similarity; undefined when the truth passes no test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FusiScore {
    Score(f64),
    Undefined,
}

impl FusiScore {
    pub fn value(self) -> Option<f64> {
        match self {
            FusiScore::Score(v) => Some(v),
            FusiScore::Undefined => None,
        }
    }
}

impl fmt::Display for FusiScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusiScore::Score(v) => write!(f, "{v:.6}"),
            FusiScore::Undefined => f.write_str("undefined"),
        }
    }
}

/// `Σ 𝕀[truth and recon pass u] / Σ 𝕀[truth passes u]`.
pub fn fusi(truth_row: &[bool], recon_row: &[bool]) -> Result<FusiScore> {
    if truth_row.len() != recon_row.len() {
        return Err(Error::LengthMismatch {
            left: truth_row.len(),
            right: recon_row.len(),
        });
    }
    let passed = truth_row.iter().filter(|&&p| p).count();
    if passed == 0 {
        return Ok(FusiScore::Undefined);
    }
    let both = truth_row.iter().zip(recon_row).filter(|(&a, &b)| a && b).count();
    Ok(FusiScore::Score(both as f64 / passed as f64))
}

fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassAtR {
    pub exact: BigRational,
    pub value: f64,
}

/// `1 - C(n-c, r) / C(n, r)`, evaluated exactly.
pub fn pass_at_r(n: u64, c: u64, r: u64) -> Result<PassAtR> {
    if c > n {
        return Err(Error::argument(format!("correct count {c} exceeds candidate count {n}")));
    }
    if r == 0 || r > n {
        return Err(Error::argument(format!("r must be in 1..={n}, got {r}")));
    }
    let miss = BigRational::new(binomial(n - c, r).into(), binomial(n, r).into());
    let exact = BigRational::one() - miss;
    let value = exact.to_f64().unwrap_or(f64::NAN);
    Ok(PassAtR { exact, value })
}

/// Test outcomes: one row per code candidate, one column per unit test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassMatrix {
    rows: Vec<Vec<bool>>,
}

impl PassMatrix {
    pub fn new(rows: Vec<Vec<bool>>) -> Result<Self> {
        if let Some(first) = rows.first() {
            if let Some(bad) = rows.iter().find(|r| r.len() != first.len()) {
                return Err(Error::LengthMismatch {
                    left: first.len(),
                    right: bad.len(),
                });
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Vec<bool>] {
        &self.rows
    }

    pub fn tests(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// One line per candidate, `0`/`1` per test.
    pub fn parse(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                l.trim()
                    .chars()
                    .map(|ch| match ch {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        other => Err(Error::format(format!("line {}: unexpected character {other:?}", n + 1))),
                    })
                    .collect::<Result<Vec<bool>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.extend(row.iter().map(|&p| if p { '1' } else { '0' }));
            out.push('\n');
        }
        out
    }
}

pub fn load_pass_matrix(path: impl AsRef<Path>) -> Result<PassMatrix> {
    PassMatrix::parse(&fs::read_to_string(path)?)
}

pub fn save_pass_matrix(matrix: &PassMatrix, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, matrix.to_text())?;
    Ok(())
}

/// Runs unit tests through an external shell command. The template may contain `{code_file}`
/// and `{test_id}`; exit status zero means the test passed, and a timeout counts as a failure.
#[derive(Debug, Clone)]
pub struct TestRunner {
    pub command: String,
    pub timeout: Duration,
    pub parallelism: usize,
}

static SCRATCH_COUNTER: AtomicU64 = AtomicU64::new(0);

impl TestRunner {
    pub fn new(command: impl Into<String>, timeout: Duration, parallelism: usize) -> Result<Self> {
        let command = command.into();
        if command.trim().is_empty() {
            return Err(Error::argument("test command template is empty"));
        }
        if parallelism == 0 {
            return Err(Error::argument("parallelism must be >= 1"));
        }
        Ok(Self {
            command,
            timeout,
            parallelism,
        })
    }

    fn run_one(&self, code_file: &Path, test_id: &str) -> Result<bool> {
        let cmd = self
            .command
            .replace("{code_file}", &code_file.to_string_lossy())
            .replace("{test_id}", test_id);
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()?;
        let start = Instant::now();
        loop {
            if let Some(status) = child.try_wait()? {
                return Ok(status.success());
            }
            if start.elapsed() >= self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Ok(false);
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    /// Pass/fail row for one candidate.
    pub fn run(&self, code: &str, test_ids: &[String]) -> Result<Vec<bool>> {
        let path = scratch_path();
        fs::write(&path, code)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.parallelism)
            .build()
            .map_err(|e| Error::argument(e.to_string()))?;
        let result = pool.install(|| {
            test_ids
                .par_iter()
                .map(|id| self.run_one(&path, id))
                .collect::<Result<Vec<bool>>>()
        });
        let _ = fs::remove_file(&path);
        result
    }

    pub fn run_matrix(&self, candidates: &[String], test_ids: &[String]) -> Result<PassMatrix> {
        let rows = candidates
            .iter()
            .map(|c| self.run(c, test_ids))
            .collect::<Result<Vec<_>>>()?;
        PassMatrix::new(rows)
    }
}

fn scratch_path() -> PathBuf {
    let n = SCRATCH_COUNTER.fetch_add(1, Ordering::Relaxed);
    std::env::temp_dir().join(format!("noir-candidate-{}-{n}.py", std::process::id()))
}

/// Differences between an embedding table and its perturbed copy, measured on a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationStats {
    /// Token strings never change under embedding randomization; kept for comparison with
    /// text-rewriting defenses.
    pub token_strings_changed: f64,
    /// Fraction of prompt token occurrences whose embedding differs in at least one feature.
    pub percent_tokens_changed: f64,
    /// `|ẽ_t - e_t|₁` per prompt token occurrence.
    pub l1_distances: Vec<f64>,
    /// `|cos(e_a, e_b) - cos(ẽ_a, ẽ_b)|` per adjacent prompt token pair.
    pub bigram_cos_changes: Vec<f64>,
    /// The same quantity for uniformly sampled token pairs.
    pub pairwise_cos_changes: Vec<f64>,
}

impl PerturbationStats {
    pub fn mean_l1(&self) -> f64 {
        mean(&self.l1_distances)
    }

    pub fn mean_bigram_cos_change(&self) -> f64 {
        mean(&self.bigram_cos_changes)
    }

    pub fn mean_pairwise_cos_change(&self) -> f64 {
        mean(&self.pairwise_cos_changes)
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
    }
}

fn l1(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum()
}

/// Compares `perturbed` against `original` over the prompts of `corpus` and `pair_samples`
/// random token pairs drawn with `seed`.
pub fn perturbation_stats(
    original: &Vocabulary,
    perturbed: &Vocabulary,
    corpus: &[CorpusRecord],
    pair_samples: usize,
    seed: u64,
) -> Result<PerturbationStats> {
    if original.len() != perturbed.len() || original.dim() != perturbed.dim() {
        return Err(Error::DimensionMismatch(format!(
            "original is {}x{}, perturbed is {}x{}",
            original.len(),
            original.dim(),
            perturbed.len(),
            perturbed.dim()
        )));
    }
    let strings_changed = original
        .tokens()
        .iter()
        .zip(perturbed.tokens())
        .filter(|(a, b)| a != b)
        .count() as f64
        / original.len() as f64;

    let mut l1_distances = Vec::new();
    let mut changed = 0usize;
    let mut bigram_cos_changes = Vec::new();
    let cos_change = |a: usize, b: usize| {
        (cosine(original.row(a), original.row(b)) - cosine(perturbed.row(a), perturbed.row(b))).abs()
    };
    for record in corpus {
        for &t in &record.prompt {
            if t >= original.len() {
                return Err(Error::Index {
                    index: t,
                    size: original.len(),
                });
            }
            let d = l1(original.row(t), perturbed.row(t));
            if original.row(t) != perturbed.row(t) {
                changed += 1;
            }
            l1_distances.push(d);
        }
        for pair in record.prompt.windows(2) {
            bigram_cos_changes.push(cos_change(pair[0], pair[1]));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairwise_cos_changes = (0..pair_samples)
        .map(|_| {
            let a = rng.gen_range(0..original.len());
            let mut b = rng.gen_range(0..original.len() - 1);
            if b >= a {
                b += 1;
            }
            cos_change(a, b)
        })
        .collect();
    let occurrences = l1_distances.len();
    Ok(PerturbationStats {
        token_strings_changed: strings_changed,
        percent_tokens_changed: if occurrences == 0 {
            0.0
        } else {
            changed as f64 / occurrences as f64
        },
        l1_distances,
        bigram_cos_changes,
        pairwise_cos_changes,
    })
}

/// Convenience wrapper taking a randomized vocabulary.
pub fn indvocab_perturbation_stats(
    original: &Vocabulary,
    randomized: &IndVocab,
    corpus: &[CorpusRecord],
    pair_samples: usize,
    seed: u64,
) -> Result<PerturbationStats> {
    perturbation_stats(original, randomized.randomized(), corpus, pair_samples, seed)
}

/// Adds i.i.d. Laplace(0, `scale`) noise to every feature.
pub fn laplace_perturb(vocab: &Vocabulary, scale: f64, seed: u64) -> Result<Vocabulary> {
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::argument(format!("Laplace scale must be finite and >= 0, got {scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = vocab
        .embeddings()
        .iter()
        .map(|&v| {
            // Inverse CDF on u ∈ (-1/2, 1/2).
            let u: f64 = rng.gen::<f64>() - 0.5;
            let noise = -scale * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln();
            (v as f64 + noise) as f32
        })
        .collect();
    Vocabulary::new(vocab.tokens().to_vec(), noisy, vocab.dim())
}

/// Laplace scale giving per-feature `eps_i` privacy: the widest feature range divided by `eps_i`.
pub fn laplace_scale_for(vocab: &Vocabulary, eps_i: f64) -> Result<f64> {
    if !(eps_i.is_finite() && eps_i > 0.0) {
        return Err(Error::argument(format!("per-feature epsilon must be > 0, got {eps_i}")));
    }
    let widest = (0..vocab.dim())
        .map(|i| {
            let col = vocab.column(i);
            let lo = col.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            (hi - lo) as f64
        })
        .fold(0.0, f64::max);
    Ok(widest / eps_i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arr::{build_indvocab, BudgetPlan, DenominatorPolicy};
    use crate::vocab::{synth_corpus, synth_vocabulary};

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_cases() {
        let a = toks("a b c d");
        assert_eq!(bleu(&a, &a, 1).unwrap(), 100.0);
        assert_eq!(bleu(&a, &toks("a b x y"), 1).unwrap(), 50.0);
        let short = bleu(&toks("a b"), &a, 1).unwrap();
        assert!((short - 100.0 * (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(bleu(&toks("a a a a"), &toks("a b c d"), 1).unwrap(), 25.0);
        assert!((bleu(&toks("a b c d"), &toks("a b x d"), 2).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert!(matches!(bleu::<&str>(&[], &a, 1), Err(Error::EmptySequence)));
        assert!(bleu(&a, &a, 0).is_err());
        assert_eq!(bleu_cumulative(&a, &a, 2).unwrap(), 100.0);
    }

    #[test]
    fn rouge_cases() {
        let a = toks("a b c d");
        assert_eq!(rouge_f1(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(rouge_f1(&a, &toks("w x y z"), 1).unwrap(), 0.0);
        // precision 2/2, recall 2/4
        assert!((rouge_f1(&toks("a b"), &a, 1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn equal_length_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let len = rng.gen_range(1..30);
            let x: Vec<u8> = (0..len).map(|_| rng.gen_range(0..6)).collect();
            let y: Vec<u8> = (0..len).map(|_| rng.gen_range(0..6)).collect();
            let mut pool = x.clone();
            let mut common = 0;
            for t in &y {
                if let Some(k) = pool.iter().position(|p| p == t) {
                    pool.swap_remove(k);
                    common += 1;
                }
            }
            let c = common as f64 / len as f64;
            assert!((rouge_f1(&y, &x, 1).unwrap() - c).abs() < 1e-12);
            assert!((bleu(&y, &x, 1).unwrap() / 100.0 - c).abs() < 1e-12);
        }
    }

    #[test]
    fn crt_cases() {
        assert_eq!(crt(&toks("a b c d"), &toks("a b c d")).unwrap(), 1.0);
        assert_eq!(crt(&toks("a b c d"), &toks("a b x y")).unwrap(), 0.5);
        assert_eq!(crt(&toks("a a b"), &toks("a x x")).unwrap(), 1.0 / 3.0);
        assert!(crt::<&str>(&[], &["a"]).is_err());
    }

    #[test]
    fn leak_cases() {
        let truth = "import numpy as np\ndef find_first_duplicate(nums):\n    seen = set()\n    return -1\n";
        assert!(leak(truth, "def find_first_duplicate(x): pass"));
        assert!(leak(truth, "x = seen"));
        assert!(!leak(truth, "def find\n\n"));
        assert!(!leak(truth, "print(1)"));
        let ids = sensitive_identifiers(truth);
        assert_eq!(ids, vec!["numpy", "np", "find_first_duplicate", "seen"]);
        assert_eq!(sensitive_identifiers("a, b = 1, 2\nc += 1\nif a == b: pass\nf(x=1)"), vec!["a", "b", "c"]);
    }

    #[test]
    fn fusi_cases() {
        let truth = [true, true, true];
        assert_eq!(fusi(&truth, &truth).unwrap(), FusiScore::Score(1.0));
        assert_eq!(fusi(&truth, &[true, false, true]).unwrap(), FusiScore::Score(2.0 / 3.0));
        assert_eq!(fusi(&[false, false], &[true, true]).unwrap(), FusiScore::Undefined);
        assert!(fusi(&[true], &[true, false]).is_err());
        let a = fusi(&[true, false, true], &[true, false, false]).unwrap();
        let b = fusi(&[true, false, true], &[true, true, false]).unwrap();
        assert_eq!(a, b);
    }

    fn enumerate_pass(n: usize, c: usize, r: usize) -> f64 {
        let mut hit = 0u64;
        let mut total = 0u64;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != r {
                continue;
            }
            total += 1;
            if (0..c).any(|k| mask & (1 << k) != 0) {
                hit += 1;
            }
        }
        hit as f64 / total as f64
    }

    #[test]
    fn pass_at_r_cases() {
        assert_eq!(pass_at_r(2, 2, 1).unwrap().value, 1.0);
        assert_eq!(pass_at_r(2, 1, 1).unwrap().value, 0.5);
        let p = pass_at_r(6, 2, 3).unwrap();
        assert_eq!(p.exact, BigRational::new(4.into(), 5.into()));
        assert_eq!(p.value, enumerate_pass(6, 2, 3));
        for n in 1..=8 {
            for c in 0..=n {
                for r in 1..=n {
                    let v = pass_at_r(n as u64, c as u64, r as u64).unwrap().value;
                    assert!((v - enumerate_pass(n, c, r)).abs() < 1e-12);
                }
                assert!((pass_at_r(n as u64, c as u64, 1).unwrap().value - c as f64 / n as f64).abs() < 1e-15);
            }
        }
        assert!(pass_at_r(3, 4, 1).is_err());
        assert!(pass_at_r(3, 1, 0).is_err());
        assert!(pass_at_r(3, 1, 4).is_err());
    }

    #[test]
    fn pass_matrix_text() {
        let m = PassMatrix::parse("101\n011\n").unwrap();
        assert_eq!(m.tests(), 3);
        assert_eq!(PassMatrix::parse(&m.to_text()).unwrap(), m);
        assert!(PassMatrix::parse("10\n1\n").is_err());
        assert!(PassMatrix::parse("1x\n").is_err());
    }

    #[test]
    fn runner_uses_exit_status() {
        let runner = TestRunner::new("grep -q {test_id} {code_file}", Duration::from_secs(5), 2).unwrap();
        let row = runner.run("alpha beta", &["alpha".into(), "gamma".into()]).unwrap();
        assert_eq!(row, vec![true, false]);
        let slow = TestRunner::new("sleep 5", Duration::from_millis(50), 1).unwrap();
        assert_eq!(slow.run("", &["t".into()]).unwrap(), vec![false]);
    }

    #[test]
    fn perturbation_identity_and_baseline() {
        let v = synth_vocabulary(6, 3, 42, 0.5).unwrap();
        let corpus = synth_corpus(&v, 10, 8, 4, 1);
        let same = perturbation_stats(&v, &v, &corpus, 50, 0).unwrap();
        assert_eq!(same.token_strings_changed, 0.0);
        assert_eq!(same.percent_tokens_changed, 0.0);
        assert!(same.l1_distances.iter().all(|&d| d == 0.0));
        assert!(same.pairwise_cos_changes.iter().all(|&d| d == 0.0));

        let plan = BudgetPlan::uniform(3.0, 3).unwrap();
        let ind = build_indvocab(&v, &plan, 5, DenominatorPolicy::ExcludeSelf).unwrap();
        let arr = indvocab_perturbation_stats(&v, &ind, &corpus, 200, 0).unwrap();
        assert_eq!(arr.token_strings_changed, 0.0);
        assert!(arr
            .bigram_cos_changes
            .iter()
            .chain(&arr.pairwise_cos_changes)
            .all(|&c| (0.0..=2.0).contains(&c)));
        let b = laplace_scale_for(&v, 1.0).unwrap();
        let noisy = laplace_perturb(&v, b, 5).unwrap();
        let lap = perturbation_stats(&v, &noisy, &corpus, 200, 0).unwrap();
        assert!(arr.mean_l1() < lap.mean_l1(), "{} vs {}", arr.mean_l1(), lap.mean_l1());
    }

    #[test]
    fn laplace_noise_has_expected_spread() {
        let v = Vocabulary::new(vec!["a".into(), "b".into()], vec![0.0; 20_000], 10_000).unwrap();
        let noisy = laplace_perturb(&v, 2.0, 1).unwrap();
        let mean_abs: f64 = noisy.embeddings().iter().map(|&x| (x as f64).abs()).sum::<f64>() / 20_000.0;
        assert!((mean_abs - 2.0).abs() < 0.1, "{mean_abs}");
    }
}
