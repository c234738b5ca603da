//! Closed-form reconstruction-risk bounds.
//!
//! All quantities are evaluated in log space so that `|V| e^ε` never overflows.

use std::fmt;

use crate::error::{Error, Result};

pub const SECONDS_PER_YEAR: f64 = 31_557_600.0;

/// `ln σ(x) = -ln(1 + e^{-x})`, stable for large `|x|`.
fn ln_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn check_eps_vocab(epsilon: f64, vocab_size: u64) -> Result<()> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::argument(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    if vocab_size < 2 {
        return Err(Error::argument(format!("vocabulary size must be >= 2, got {vocab_size}")));
    }
    Ok(())
}

/// Probability range for "token `t` produced the observed randomized embedding".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenBound {
    pub epsilon: f64,
    pub vocab_size: u64,
    /// `1 / (1 + (|V|-1) e^ε)`
    pub lower: f64,
    /// `e^ε / (e^ε + |V| - 1)`
    pub upper: f64,
}

pub fn token_inference_bounds(epsilon: f64, vocab_size: u64) -> Result<TokenBound> {
    check_eps_vocab(epsilon, vocab_size)?;
    let ln_psi = ((vocab_size - 1) as f64).ln();
    Ok(TokenBound {
        epsilon,
        vocab_size,
        lower: ln_sigmoid(-(ln_psi + epsilon)).exp(),
        upper: ln_sigmoid(epsilon - ln_psi).exp(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptBoundParams {
    pub epsilon: f64,
    pub vocab_size: u64,
    pub prompt_len: usize,
    /// Gist threshold `ρ ∈ (0, 1]`.
    pub rho: f64,
    /// Sequential advantage `γ ∈ [0, 1]`.
    pub gamma: f64,
}

impl PromptBoundParams {
    pub fn validate(&self) -> Result<()> {
        check_eps_vocab(self.epsilon, self.vocab_size)?;
        if self.prompt_len == 0 {
            return Err(Error::argument("prompt length must be >= 1"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::argument(format!("rho must be in (0, 1], got {}", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::argument(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        Ok(())
    }

    /// `⌈ρ|x|⌉`, with a small guard so that e.g. `0.2 * 200` is 40 and not 41.
    pub fn correct_tokens(&self) -> usize {
        let raw = self.rho * self.prompt_len as f64;
        ((raw - 1e-9).ceil().max(0.0) as usize).min(self.prompt_len)
    }
}

/// A prompt-level bound with its inputs echoed for reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub params: PromptBoundParams,
    pub correct_tokens: usize,
    pub value: f64,
    pub log10_value: f64,
    /// `γ` pushed a factor outside `[0, 1]`; the value is reported as 1.
    pub vacuous: bool,
}

/// `(a + γ)^C · (b - γ)^{|x|-C}` with `a = (ψe^ε+1)/(ψe^ε+ψ²)`, `b = ψe^ε/(ψe^ε+1)`,
/// `ψ = |V|-1` and `C = ⌈ρ|x|⌉`. With `γ = 0` this is the sequence-independent bound.
pub fn prompt_reconstruction_bound(params: PromptBoundParams) -> Result<BoundReport> {
    params.validate()?;
    let psi = (params.vocab_size - 1) as f64;
    let ln_psi = psi.ln();
    let s = ln_psi + params.epsilon; // ln(ψ e^ε)
    // ln a = ln(ψe^ε + 1) - ln(ψe^ε + ψ²) = ln(1 + e^{-s}) - ln(1 + ψ e^{-ε})
    let ln_a = (-s).exp().ln_1p() - (ln_psi - params.epsilon).exp().ln_1p();
    let ln_b = ln_sigmoid(s);
    let c = params.correct_tokens();
    let rest = params.prompt_len - c;

    let (ln_correct, ln_incorrect) = if params.gamma == 0.0 {
        (ln_a, ln_b)
    } else {
        let a = ln_a.exp() + params.gamma;
        let b = ln_b.exp() - params.gamma;
        if a > 1.0 || b < 0.0 {
            return Ok(BoundReport {
                params,
                correct_tokens: c,
                value: 1.0,
                log10_value: 0.0,
                vacuous: true,
            });
        }
        (a.ln(), if b == 0.0 { f64::NEG_INFINITY } else { b.ln() })
    };
    let term = |count: usize, ln: f64| if count == 0 { 0.0 } else { count as f64 * ln };
    let ln_value = term(c, ln_correct) + term(rest, ln_incorrect);
    Ok(BoundReport {
        params,
        correct_tokens: c,
        value: ln_value.exp(),
        log10_value: ln_value / std::f64::consts::LN_10,
        vacuous: false,
    })
}

/// Largest per-position accuracy over a corpus of prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaEstimate {
    pub gamma: f64,
    pub position: usize,
    pub per_position: Vec<f64>,
}

/// An attacker that reconstructs a prompt position by position, seeing its own earlier guesses.
pub trait SequentialAttacker<O> {
    fn guess(&mut self, observed: &[O], position: usize, previous: &[usize]) -> usize;
}

impl<O, F> SequentialAttacker<O> for F
where
    F: FnMut(&[O], usize, &[usize]) -> usize,
{
    fn guess(&mut self, observed: &[O], position: usize, previous: &[usize]) -> usize {
        self(observed, position, previous)
    }
}

/// `γ = max_j Σ_x 𝕀(t̂_j = t_j) / |D|`. Prompts shorter than `j` count as misses at `j`.
pub fn estimate_gamma<O, A: SequentialAttacker<O>>(
    truths: &[Vec<usize>],
    observed: &[Vec<O>],
    attacker: &mut A,
) -> Result<GammaEstimate> {
    if truths.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if truths.len() != observed.len() {
        return Err(Error::LengthMismatch {
            left: truths.len(),
            right: observed.len(),
        });
    }
    let longest = truths.iter().map(Vec::len).max().unwrap_or(0);
    let mut hits = vec![0usize; longest];
    for (truth, obs) in truths.iter().zip(observed) {
        if truth.len() != obs.len() {
            return Err(Error::LengthMismatch {
                left: truth.len(),
                right: obs.len(),
            });
        }
        let mut previous = Vec::with_capacity(truth.len());
        for (j, &t) in truth.iter().enumerate() {
            let g = attacker.guess(obs, j, &previous);
            if g == t {
                hits[j] += 1;
            }
            previous.push(g);
        }
    }
    let per_position: Vec<f64> = hits.iter().map(|&h| h as f64 / truths.len() as f64).collect();
    let (position, gamma) = per_position
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (j, g)| if g > best.1 { (j, g) } else { best });
    Ok(GammaEstimate {
        gamma,
        position,
        per_position,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BruteForceYears {
    /// Expected years to the first success, `½ · (1/p) / rate / seconds-per-year`.
    pub expected_years: f64,
    /// The same figure without the `½` factor.
    pub worst_case_years: f64,
}

pub fn brute_force_time(success_probability: f64, guesses_per_second: f64) -> Result<BruteForceYears> {
    if !(success_probability > 0.0 && success_probability <= 1.0) {
        return Err(Error::argument(format!(
            "success probability must be in (0, 1], got {success_probability}"
        )));
    }
    if !(guesses_per_second.is_finite() && guesses_per_second > 0.0) {
        return Err(Error::argument(format!(
            "guess rate must be positive, got {guesses_per_second}"
        )));
    }
    let worst_case_years = 1.0 / success_probability / guesses_per_second / SECONDS_PER_YEAR;
    Ok(BruteForceYears {
        expected_years: 0.5 * worst_case_years,
        worst_case_years,
    })
}

/// One row of a bound sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub report: BoundReport,
    pub years_at_one_guess_per_second: f64,
}

pub fn sweep(grid: &[PromptBoundParams]) -> Result<Vec<SweepRow>> {
    grid.iter()
        .map(|&p| {
            let report = prompt_reconstruction_bound(p)?;
            let years = if report.value > 0.0 {
                brute_force_time(report.value.min(1.0), 1.0)?.expected_years
            } else {
                f64::INFINITY
            };
            Ok(SweepRow {
                report,
                years_at_one_guess_per_second: years,
            })
        })
        .collect()
}

/// Plain-text sweep table.
pub struct SweepTable<'a>(pub &'a [SweepRow]);

impl fmt::Display for SweepTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>8} {:>10} {:>6} {:>6} {:>7} {:>12} {:>12} {:>14}",
            "eps", "|V|", "|x|", "rho", "gamma", "bound", "log10", "years@1gps"
        )?;
        for row in self.0 {
            let p = row.report.params;
            writeln!(
                f,
                "{:>8.3} {:>10} {:>6} {:>6.3} {:>7.4} {:>12.4e} {:>12.4} {:>14.4e}{}",
                p.epsilon,
                p.vocab_size,
                p.prompt_len,
                p.rho,
                p.gamma,
                row.report.value,
                row.report.log10_value,
                row.years_at_one_guess_per_second,
                if row.report.vacuous { "  (vacuous)" } else { "" }
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn token_bounds_known_values() {
        for v in [2u64, 6, 1000] {
            let b = token_inference_bounds(0.0, v).unwrap();
            assert!(rel(b.lower, 1.0 / v as f64) < 1e-14);
            assert!(rel(b.upper, 1.0 / v as f64) < 1e-14);
        }
        let b = token_inference_bounds(2f64.ln(), 2).unwrap();
        assert!(rel(b.upper, 2.0 / 3.0) < 1e-14);
        assert!(rel(b.lower, 1.0 / 3.0) < 1e-14);
        // 50-digit evaluation: e^13/(e^13+31999) = 0.93255024417785799...
        let b = token_inference_bounds(13.0, 32_000).unwrap();
        assert!(rel(b.upper, 0.932_550_244_177_858) < 1e-13);
        assert!(rel(b.lower, 7.063_750_138_508_673e-11) < 1e-12);
        assert!(token_inference_bounds(-1.0, 5).is_err());
        assert!(token_inference_bounds(1.0, 1).is_err());
    }

    #[test]
    fn token_bounds_are_ordered_and_monotone() {
        let mut prev = token_inference_bounds(0.0, 151_000).unwrap();
        for k in 1..200 {
            let b = token_inference_bounds(k as f64 * 0.25, 151_000).unwrap();
            assert!(b.lower <= 1.0 / 151_000.0 && 1.0 / 151_000.0 <= b.upper);
            assert!(b.upper >= prev.upper && b.lower <= prev.lower);
            assert!(b.lower > 0.0 && b.upper < 1.0 || b.upper == 1.0 && k > 150);
            prev = b;
        }
        assert!(token_inference_bounds(60.0, 6).unwrap().upper >= 1.0 - 1e-15);
    }

    #[test]
    fn anchor_values() {
        // 50-digit reference values: 1.0937452621e-13 (rho 0.2), 6.1130540153e-13 (rho 0.4).
        for (rho, expect) in [(0.2, 1.093_745_262_140_725_6e-13), (0.4, 6.113_054_015_296_08e-13)] {
            let r = prompt_reconstruction_bound(PromptBoundParams {
                epsilon: 13.0,
                vocab_size: 151_000,
                prompt_len: 200,
                rho,
                gamma: 0.146,
            })
            .unwrap();
            assert!(!r.vacuous);
            assert!(r.value < 5.5e-11);
            assert!(rel(r.value, expect) < 1e-9, "{} vs {expect}", r.value);
        }
        let r = prompt_reconstruction_bound(PromptBoundParams {
            epsilon: 2.0,
            vocab_size: 6,
            prompt_len: 8,
            rho: 0.5,
            gamma: 0.0,
        })
        .unwrap();
        assert!(rel(r.value, 0.126_532_758_863_724_86) < 1e-12);
    }

    #[test]
    fn gamma_zero_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = PromptBoundParams {
                epsilon: rng.gen_range(0.0..15.0),
                vocab_size: rng.gen_range(2..200_000),
                prompt_len: rng.gen_range(1..300),
                rho: rng.gen_range(0.01..=1.0),
                gamma: 0.0,
            };
            let psi = (p.vocab_size - 1) as f64;
            let e = p.epsilon.exp();
            let c = p.correct_tokens() as i32;
            let direct = ((psi * e + 1.0) / (psi * e + psi * psi)).powi(c)
                * (psi * e / (psi * e + 1.0)).powi(p.prompt_len as i32 - c);
            let got = prompt_reconstruction_bound(p).unwrap().value;
            assert!(rel(got, direct) < 1e-9 || (got < 1e-300 && direct < 1e-300), "{p:?}: {got} vs {direct}");
        }
    }

    #[test]
    fn rho_one_is_product_of_token_terms() {
        let p = PromptBoundParams {
            epsilon: 3.0,
            vocab_size: 50,
            prompt_len: 7,
            rho: 1.0,
            gamma: 0.0,
        };
        let psi = 49.0f64;
        let e = 3f64.exp();
        let a = (psi * e + 1.0) / (psi * e + psi * psi);
        assert!(rel(prompt_reconstruction_bound(p).unwrap().value, a.powi(7)) < 1e-12);
    }

    #[test]
    fn monotonicity() {
        let base = PromptBoundParams {
            epsilon: 5.0,
            vocab_size: 1000,
            prompt_len: 20,
            rho: 0.4,
            gamma: 0.01,
        };
        let v = |p: PromptBoundParams| prompt_reconstruction_bound(p).unwrap().value;
        let mut prev = v(base);
        for len in [25usize, 30, 40, 80] {
            let cur = v(PromptBoundParams { prompt_len: len, ..base });
            assert!(cur <= prev);
            prev = cur;
        }
        assert!(v(PromptBoundParams { epsilon: 6.0, ..base }) >= v(base));
        assert!(v(PromptBoundParams { gamma: 0.05, ..base }) >= v(base));
    }

    #[test]
    fn vacuous_gamma() {
        let r = prompt_reconstruction_bound(PromptBoundParams {
            epsilon: 30.0,
            vocab_size: 10,
            prompt_len: 10,
            rho: 0.5,
            gamma: 0.5,
        })
        .unwrap();
        assert!(r.vacuous);
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn correct_token_rounding() {
        let p = |rho, len| PromptBoundParams {
            epsilon: 1.0,
            vocab_size: 10,
            prompt_len: len,
            rho,
            gamma: 0.0,
        };
        assert_eq!(p(0.2, 200).correct_tokens(), 40);
        assert_eq!(p(0.25, 8).correct_tokens(), 2);
        assert_eq!(p(0.3, 8).correct_tokens(), 3);
        assert_eq!(p(1.0, 8).correct_tokens(), 8);
    }

    #[test]
    fn brute_force_years() {
        let y = brute_force_time(26f64.powi(-8), 1.0).unwrap();
        assert!((y.expected_years - 3308.65).abs() < 0.1);
        let y = brute_force_time(1.0, 1.0).unwrap();
        assert_eq!(y.expected_years, 0.5 / SECONDS_PER_YEAR);
        let y = brute_force_time(26f64.powi(-72), 1.0).unwrap();
        assert!(rel(y.worst_case_years, 2.393_189_489_446_984e94) < 1e-9);
        assert!(rel(y.expected_years, 1.196_594_744_723_492e94) < 1e-9);
        assert!(brute_force_time(0.0, 1.0).is_err());
        assert!(brute_force_time(0.5, 0.0).is_err());
    }

    #[test]
    fn gamma_estimates() {
        let truths = vec![vec![0, 1, 2], vec![3, 4, 5]];
        let observed = truths.clone();
        let mut oracle = |obs: &[usize], j: usize, _: &[usize]| obs[j];
        assert_eq!(estimate_gamma(&truths, &observed, &mut oracle).unwrap().gamma, 1.0);
        let mut absent = |_: &[usize], _: usize, _: &[usize]| 99usize;
        assert_eq!(estimate_gamma(&truths, &observed, &mut absent).unwrap().gamma, 0.0);
        let mut first_only = |obs: &[usize], j: usize, _: &[usize]| if j == 0 && obs[0] == 0 { 0 } else { 99 };
        let g = estimate_gamma(&truths, &observed, &mut first_only).unwrap();
        assert_eq!((g.gamma, g.position), (0.5, 0));
        let empty: Vec<Vec<usize>> = vec![];
        assert!(matches!(
            estimate_gamma(&empty, &empty, &mut oracle),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn sweep_table_has_one_row_per_tuple() {
        let grid: Vec<_> = [9.0, 13.0]
            .iter()
            .map(|&e| PromptBoundParams {
                epsilon: e,
                vocab_size: 151_000,
                prompt_len: 20,
                rho: 0.2,
                gamma: 0.0,
            })
            .collect();
        let rows = sweep(&grid).unwrap();
        let text = SweepTable(&rows).to_string();
        assert_eq!(text.lines().count(), 3);
    }
}
