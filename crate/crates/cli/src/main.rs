mod commands;
mod config;

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

/// Split-inference privacy toolkit: randomized vocabularies, token permutations, bounds,
/// attacks, metrics and the split client/server.
#[derive(Debug, Parser)]
#[command(name = "noir", version)]
pub struct Cli {
    /// Flat key=value file; its entries fill flags not given on the command line.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Write the report to FILE instead of stdout.
    #[arg(long, short = 'o', global = true, value_name = "FILE")]
    pub output: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Source vocabularies.
    #[command(subcommand)]
    Vocab(VocabCmd),
    /// Randomized vocabularies.
    #[command(subcommand)]
    Indvocab(IndvocabCmd),
    /// Token permutations.
    #[command(subcommand)]
    Ltok(LtokCmd),
    /// Privacy bounds.
    #[command(subcommand)]
    Bounds(BoundsCmd),
    /// Reconstruction attacks.
    #[command(subcommand)]
    Attack(AttackCmd),
    /// Evaluation metrics.
    #[command(subcommand)]
    Metrics(MetricsCmd),
    /// Cloud side of the split protocol over TCP.
    Serve(ServeArgs),
    /// Client side of the split protocol over TCP.
    #[command(subcommand)]
    Client(ClientCmd),
    /// Runs every acceptance check against a fixture directory.
    Repro(ReproArgs),
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Generator seed.
    #[arg(long, env = "NOIR_SEED")]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    /// Replacement weights normalized over the other tokens.
    ExcludeSelf,
    /// Replacement weights normalized with the token itself included.
    IncludeSelf,
}

impl From<PolicyArg> for noir_core::arr::DenominatorPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::ExcludeSelf => Self::ExcludeSelf,
            PolicyArg::IncludeSelf => Self::IncludeSelf,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum VocabCmd {
    /// Synthetic vocabulary with i.i.d. uniform features.
    Gen {
        #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
        size: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        dim: u64,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true, value_parser = parse::positive_f32)]
        scale: f32,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shape, digest, feature ranges and minimal feasible budgets.
    Inspect {
        #[arg(long)]
        vocab: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum IndvocabCmd {
    /// Randomizes every embedding once.
    Build {
        #[arg(long)]
        vocab: PathBuf,
        /// Total budget; split uniformly over features unless --split is given.
        #[arg(long, allow_negative_numbers = true, value_parser = parse::nonneg_f64)]
        eps: f64,
        /// File with one non-negative weight per feature; the total is split proportionally.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "exclude-self")]
        policy: PolicyArg,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Checks a randomized vocabulary against its source and measures its privacy loss.
    Audit {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        indvocab: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum LtokCmd {
    /// Secret uniform permutation of token indices.
    Gen {
        /// Permutation size; taken from --vocab when omitted.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..), required_unless_present = "vocab")]
        size: Option<u64>,
        #[arg(long, conflicts_with = "size")]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum BoundsCmd {
    /// Range of the posterior that a token produced an observed embedding.
    Token {
        #[arg(long, allow_negative_numbers = true, value_parser = parse::nonneg_f64)]
        eps: f64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
        vocab_size: u64,
    },
    /// Probability of recovering at least a fraction rho of a prompt.
    Prompt {
        #[arg(long, allow_negative_numbers = true, value_parser = parse::nonneg_f64)]
        eps: f64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
        vocab_size: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        len: u64,
        #[arg(long, allow_negative_numbers = true, value_parser = parse::rho)]
        rho: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true, value_parser = parse::unit)]
        gamma: f64,
    },
    /// Prompt bound over the product of comma-separated grids.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true, value_parser = parse::nonneg_f64)]
        eps: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true, value_parser = clap::value_parser!(u64).range(2..))]
        vocab_size: Vec<u64>,
        #[arg(long, value_delimiter = ',', required = true, value_parser = clap::value_parser!(u64).range(1..))]
        len: Vec<u64>,
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true, value_parser = parse::rho)]
        rho: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0", allow_negative_numbers = true, value_parser = parse::unit)]
        gamma: Vec<f64>,
    },
    /// Years of brute-force guessing for a given per-guess success probability.
    Years {
        /// Probability in (0, 1]; accepts a decimal or a power such as 26^-8.
        #[arg(long, allow_negative_numbers = true, value_parser = parse::probability)]
        prob: f64,
        /// Guesses per second.
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true, value_parser = parse::positive_f64)]
        rate: f64,
    },
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    /// Bleu threshold, 0-100.
    #[arg(long, default_value_t = 20.0)]
    pub rho_b: f64,
    /// Rouge-F1 threshold, 0-1.
    #[arg(long, default_value_t = 0.4)]
    pub rho_r: f64,
    /// Functional-similarity threshold in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    pub rho_f: f64,
    /// Simplified CodeBleu threshold, 0-100.
    #[arg(long, default_value_t = 20.0)]
    pub rho_cb: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AsrModeArg {
    Prompt,
    Code,
}

#[derive(Debug, Subcommand)]
pub enum AttackCmd {
    /// Bayes-optimal token posteriors for rows of a randomized vocabulary.
    Bayes {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        indvocab: PathBuf,
        /// Tokens whose randomized rows are attacked; all tokens when omitted.
        #[arg(long, value_delimiter = ',')]
        tokens: Vec<String>,
    },
    /// Monte Carlo reconstruction game against fresh randomized vocabularies.
    Game {
        #[arg(long)]
        vocab: PathBuf,
        /// Per-feature budget.
        #[arg(long, allow_negative_numbers = true, value_parser = parse::nonneg_f64)]
        eps_i: f64,
        #[arg(long, value_enum, default_value = "exclude-self")]
        policy: PolicyArg,
        /// Number of random prompts cycled through by the trials.
        #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
        prompts: u64,
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
        len: u64,
        #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1", allow_negative_numbers = true, value_parser = parse::rho)]
        rho: Vec<f64>,
        /// Replace the Bayes attacker with a uniform random guesser.
        #[arg(long)]
        uniform: bool,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Frequency attack on a synthetic templated corpus.
    Freq {
        #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
        prompts: u64,
        #[arg(long, default_value_t = 5)]
        template_len: u64,
        #[arg(long, default_value_t = 10)]
        body_len: u64,
        #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(2..))]
        body_tokens: u64,
        /// Probability of the most frequent body token; bodies are uniform when omitted.
        #[arg(long, allow_negative_numbers = true, value_parser = parse::unit)]
        top_share: Option<f64>,
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
        k: u64,
        #[arg(long, default_value_t = 10)]
        min_support: u64,
        /// Observe raw randomized rows instead of encoder outputs.
        #[arg(long)]
        no_mixing: bool,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Attack success rates from reconstructions and ground truth.
    Asr {
        /// One record per line, whitespace-separated tokens.
        #[arg(long)]
        truth: PathBuf,
        /// One reconstruction per line: record index, a tab, then tokens.
        #[arg(long)]
        recon: PathBuf,
        #[arg(long, value_enum, default_value = "prompt")]
        mode: AsrModeArg,
        /// Pass matrix with one row per record (code mode).
        #[arg(long, required_if_eq("mode", "code"))]
        truth_pass: Option<PathBuf>,
        /// Pass matrix with one row per reconstruction line (code mode).
        #[arg(long, required_if_eq("mode", "code"))]
        recon_pass: Option<PathBuf>,
        #[command(flatten)]
        thresholds: ThresholdArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum MetricsCmd {
    Bleu {
        #[arg(long)]
        cand: String,
        #[arg(long = "ref")]
        reference: String,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        /// Geometric mean over orders 1..=n instead of the single order n.
        #[arg(long)]
        cumulative: bool,
    },
    Rouge {
        #[arg(long)]
        cand: String,
        #[arg(long = "ref")]
        reference: String,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
    },
    Crt {
        #[arg(long)]
        truth: String,
        #[arg(long)]
        recon: String,
    },
    /// Whether the reconstruction reveals any sensitive identifier of the truth code.
    Leak {
        #[arg(long)]
        truth_code: PathBuf,
        #[arg(long)]
        recon_code: PathBuf,
    },
    Fusi {
        /// Truth pass row such as 1011.
        #[arg(long)]
        truth: String,
        #[arg(long)]
        recon: String,
    },
    Passr {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        c: u64,
        #[arg(long)]
        r: u64,
    },
    /// Embedding perturbation of a randomized vocabulary, with an optional Laplace comparison.
    Perturb {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        indvocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 1000)]
        pairs: u64,
        /// Also perturb with Laplace noise calibrated to this per-feature budget.
        #[arg(long, allow_negative_numbers = true, value_parser = parse::positive_f64)]
        laplace_eps_i: Option<f64>,
        #[command(flatten)]
        seed: SeedArg,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MiddleArg {
    Identity,
    Affine,
    Attention,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub addr: String,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub dim: u64,
    #[arg(long, value_enum, default_value = "affine")]
    pub middle: MiddleArg,
    #[arg(long, default_value_t = 0)]
    pub lora_rank: u64,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct ClientArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub addr: String,
    #[arg(long)]
    pub indvocab: PathBuf,
    #[arg(long)]
    pub perm: PathBuf,
    /// Hidden width; must match the server.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub dim: u64,
    /// Seed of the client encoder and decoder weights.
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum ClientCmd {
    Generate {
        #[command(flatten)]
        common: ClientArgs,
        /// Whitespace-separated prompt tokens.
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 16)]
        max_tokens: u64,
        #[arg(long, default_value_t = 0.25, allow_negative_numbers = true, value_parser = parse::nonneg_f64)]
        temperature: f64,
        #[command(flatten)]
        seed: SeedArg,
    },
    Tune {
        #[command(flatten)]
        common: ClientArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
        rounds: u64,
        #[arg(long, default_value_t = 0.05, allow_negative_numbers = true, value_parser = parse::nonneg_f64)]
        lr: f64,
        /// Request a cloud-side adapter.
        #[arg(long)]
        lora: bool,
    },
}

#[derive(Debug, Args)]
pub struct ReproArgs {
    #[arg(long, default_value = "crates/core/fixtures")]
    pub fixtures: PathBuf,
    /// Regenerate the fixture files before running.
    #[arg(long)]
    pub write_fixtures: bool,
    /// Run only these criteria.
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<usize>,
}

pub mod parse {
    fn number(s: &str) -> Result<f64, String> {
        s.trim().parse::<f64>().map_err(|_| format!("{s:?} is not a number"))
    }

    pub fn nonneg_f64(s: &str) -> Result<f64, String> {
        let v = number(s)?;
        if v.is_finite() && v >= 0.0 {
            Ok(v)
        } else {
            Err(format!("must be finite and >= 0, got {s}"))
        }
    }

    pub fn positive_f64(s: &str) -> Result<f64, String> {
        let v = number(s)?;
        if v.is_finite() && v > 0.0 {
            Ok(v)
        } else {
            Err(format!("must be finite and > 0, got {s}"))
        }
    }

    pub fn positive_f32(s: &str) -> Result<f32, String> {
        positive_f64(s).map(|v| v as f32)
    }

    pub fn unit(s: &str) -> Result<f64, String> {
        let v = number(s)?;
        if (0.0..=1.0).contains(&v) {
            Ok(v)
        } else {
            Err(format!("must be in [0, 1], got {s}"))
        }
    }

    pub fn rho(s: &str) -> Result<f64, String> {
        let v = number(s)?;
        if v > 0.0 && v <= 1.0 {
            Ok(v)
        } else {
            Err(format!("must be in (0, 1], got {s}"))
        }
    }

    /// A decimal or `base^exponent`.
    pub fn probability(s: &str) -> Result<f64, String> {
        let v = match s.split_once('^') {
            Some((base, exp)) => {
                let base = number(base)?;
                let exp = number(exp)?;
                base.powf(exp)
            }
            None => number(s)?,
        };
        if v > 0.0 && v <= 1.0 {
            Ok(v)
        } else {
            Err(format!("must be a probability in (0, 1], got {s} = {v}"))
        }
    }
}

/// Process exit codes.
pub const EXIT_OK: u8 = 0;
pub const EXIT_DOMAIN: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let mut root = Cli::command();
    root.build();
    let argv = match config::config_path(&argv) {
        Some(path) => match config::load(path.as_ref()) {
            Ok(entries) => {
                let (argv, ignored) = config::inject(argv, &entries, &root);
                for key in ignored {
                    eprintln!("warning: config key {key:?} does not apply to this command");
                }
                argv
            }
            Err(e) => {
                eprintln!("error: --config: {e:#}");
                return ExitCode::from(EXIT_USAGE);
            }
        },
        None => argv,
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    let emit = |report: &str| -> Result<(), String> {
        match &cli.output {
            Some(path) => fs::write(path, report).map_err(|e| format!("writing {}: {e}", path.display())),
            None => {
                print!("{report}");
                Ok(())
            }
        }
    };
    match commands::run(&cli.command) {
        Ok(report) => match emit(&report) {
            Ok(()) => ExitCode::from(EXIT_OK),
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_DOMAIN)
            }
        },
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(commands::Failure::Domain { error, report }) => {
            if let Some(Err(e)) = report.as_deref().map(emit) {
                eprintln!("error: {e}");
            }
            eprintln!("error: {error:#}");
            ExitCode::from(EXIT_DOMAIN)
        }
    }
}
