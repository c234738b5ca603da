//! Subcommand adapters. Each returns its report as text; numeric work stays in `noir_core`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use noir_core::adversary::{
    compute_asr, frequency_attack, reconstruction_game, AsrMode, BayesAttacker, GameThresholds, Guesser,
};
use noir_core::arr::{
    build_indvocab, build_indvocab_serial, cell_stats, load_indvocab, measure_effective_epsilon, save_indvocab,
    BudgetPlan, DenominatorPolicy, AUDIT_LIMIT,
};
use noir_core::bounds::{
    brute_force_time, prompt_reconstruction_bound, sweep, token_inference_bounds, PromptBoundParams, SweepTable,
};
use noir_core::ltok::{load_permutation, save_permutation, TokenPermutation};
use noir_core::metrics::{
    bleu, bleu_cumulative, crt, fusi, indvocab_perturbation_stats, laplace_perturb, laplace_scale_for, leak,
    pass_at_r, perturbation_stats, rouge_f1, sensitive_identifiers, PassMatrix, PerturbationStats,
};
use noir_core::protocol::{
    client_generate, serve_tcp, stuning_round, ClientModel, ClientSession, GenerationConfig, Middle, ServerConfig,
    SessionMode,
};
use noir_core::repro::{
    encoder_observations, load_fixtures, raw_observations, run_criterion, template_corpus, write_fixtures,
    ReproReport, CRITERIA,
};
use noir_core::vocab::{load_corpus, load_vocabulary, save_vocabulary, synth_vocabulary, Vocabulary};

use crate::{AsrModeArg, AttackCmd, BoundsCmd, ClientArgs, ClientCmd, Cmd, IndvocabCmd, LtokCmd, MetricsCmd, MiddleArg, VocabCmd};

#[derive(Debug)]
pub enum Failure {
    /// A flag violates a precondition that clap could not express.
    Usage(String),
    /// The command ran but the domain rejected its input or a check failed.
    Domain {
        error: anyhow::Error,
        report: Option<String>,
    },
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Domain {
            error: e.into(),
            report: None,
        }
    }
}

type Outcome = Result<String, Failure>;

fn usage(flag: &str, msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(format!("--{flag}: {msg}"))
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn load_vocab(path: &Path) -> anyhow::Result<Vocabulary> {
    load_vocabulary(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

pub fn run(cmd: &Cmd) -> Outcome {
    match cmd {
        Cmd::Vocab(c) => vocab(c),
        Cmd::Indvocab(c) => indvocab(c),
        Cmd::Ltok(c) => ltok(c),
        Cmd::Bounds(c) => bounds(c),
        Cmd::Attack(c) => attack(c),
        Cmd::Metrics(c) => metrics(c),
        Cmd::Serve(a) => serve(a),
        Cmd::Client(c) => client(c),
        Cmd::Repro(a) => repro(a),
    }
}

fn vocab(cmd: &VocabCmd) -> Outcome {
    match cmd {
        VocabCmd::Gen {
            size,
            dim,
            scale,
            seed,
            out,
        } => {
            let v = synth_vocabulary(*size as usize, *dim as usize, seed.seed, *scale)?;
            save_vocabulary(&v, out)?;
            Ok(format!("tokens: {}\ndim: {}\ndigest: {}\nwritten: {}\n", v.len(), v.dim(), hex(&v.digest()), out.display()))
        }
        VocabCmd::Inspect { vocab } => {
            let v = load_vocab(vocab)?;
            let mut out = format!("tokens: {}\ndim: {}\ndigest: {}\n", v.len(), v.dim(), hex(&v.digest()));
            let mut minimal_total = 0.0;
            for i in 0..v.dim() {
                let col = v.column(i);
                let lo = col.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut need: f64 = 0.0;
                for t in 0..v.len() {
                    need = need.max(cell_stats(&v, t, i)?.min_feasible_epsilon());
                }
                minimal_total += need;
                writeln!(out, "feature {i}: min {lo} max {hi} minimal_eps_i {need:.6}").ok();
            }
            writeln!(out, "minimal_total_eps_any_split: {minimal_total:.6}").ok();
            Ok(out)
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_split(path: &Path, dim: usize) -> Result<Vec<f64>, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading split {}", path.display()))?;
    let weights = text
        .split_whitespace()
        .map(|w| w.parse::<f64>())
        .collect::<Result<Vec<f64>, _>>()
        .map_err(|e| usage("split", format!("{}: {e}", path.display())))?;
    if weights.len() != dim {
        return Err(usage("split", format!("expected {dim} weights, found {}", weights.len())));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(usage("split", "weights must be finite, >= 0 and not all zero"));
    }
    Ok(weights)
}

fn audit_lines(out: &mut String, vocab: &Vocabulary, plan: &BudgetPlan, policy: DenominatorPolicy) -> anyhow::Result<()> {
    if vocab.len() > AUDIT_LIMIT {
        writeln!(out, "effective_eps: skipped (|V| > {AUDIT_LIMIT})").ok();
        return Ok(());
    }
    let eff = measure_effective_epsilon(vocab, plan, policy)?;
    for (i, (e, n)) in eff.per_feature.iter().zip(plan.per_feature()).enumerate() {
        writeln!(out, "feature {i}: nominal_eps_i {n:.6} effective_eps_i {e:.6}").ok();
    }
    writeln!(out, "effective_total_eps: {:.6}", eff.total).ok();
    Ok(())
}

fn indvocab(cmd: &IndvocabCmd) -> Outcome {
    match cmd {
        IndvocabCmd::Build {
            vocab,
            eps,
            split,
            policy,
            seed,
            out,
        } => {
            let v = load_vocab(vocab)?;
            let plan = match split {
                None => BudgetPlan::uniform(*eps, v.dim())?,
                Some(path) => {
                    let w = read_split(path, v.dim())?;
                    let sum: f64 = w.iter().sum();
                    BudgetPlan::from_parts(*eps, w.iter().map(|x| eps * x / sum).collect())?
                }
            };
            let policy = DenominatorPolicy::from(*policy);
            let ind = build_indvocab(&v, &plan, seed.seed, policy)?;
            save_indvocab(&ind, out)?;
            let mut report = format!(
                "tokens: {}\ndim: {}\npolicy: {}\nseed: {}\ntotal_eps: {}\n",
                ind.len(),
                ind.dim(),
                policy.name(),
                seed.seed,
                plan.total_epsilon()
            );
            audit_lines(&mut report, &v, &plan, policy)?;
            writeln!(report, "written: {}", out.display()).ok();
            Ok(report)
        }
        IndvocabCmd::Audit { vocab, indvocab } => {
            let v = load_vocab(vocab)?;
            let ind = load_indvocab(indvocab).with_context(|| format!("loading {}", indvocab.display()))?;
            let audit = ind.audit_against(&v);
            let mut report = format!(
                "digest_matches: {}\nsupport_closed: {}\nrebuild_matches: {}\npolicy: {}\nseed: {}\n",
                audit.digest_matches,
                audit.support_closed,
                audit.rebuild_matches,
                ind.policy().name(),
                ind.seed()
            );
            if audit.digest_matches {
                audit_lines(&mut report, &v, ind.plan(), ind.policy())?;
            }
            if audit.ok() {
                writeln!(report, "audit: ok").ok();
                Ok(report)
            } else {
                writeln!(report, "audit: failed").ok();
                Err(Failure::Domain {
                    error: anyhow!("randomized vocabulary does not derive from {}", vocab.display()),
                    report: Some(report),
                })
            }
        }
    }
}

fn ltok(cmd: &LtokCmd) -> Outcome {
    let LtokCmd::Gen { size, vocab, seed, out } = cmd;
    let n = match (size, vocab) {
        (Some(s), _) => *s as usize,
        (None, Some(path)) => load_vocab(path)?.len(),
        (None, None) => return Err(usage("size", "required unless --vocab is given")),
    };
    let perm = TokenPermutation::generate(n, seed.seed)?;
    save_permutation(&perm, out)?;
    let moved = (0..n).filter(|&t| perm.forward(t).map(|l| l != t).unwrap_or(false)).count();
    Ok(format!("size: {n}\nseed: {}\nmoved: {moved}\nwritten: {}\n", seed.seed, out.display()))
}

/// `1234567.891` → `1,234,567.89`.
pub fn thousands(v: f64) -> String {
    if !v.is_finite() || v.abs() >= 1e15 {
        return format!("{v:.6e}");
    }
    let s = format!("{:.2}", v.abs());
    let (int, frac) = s.split_once('.').expect("two decimals");
    let mut grouped = String::new();
    for (i, ch) in int.chars().enumerate() {
        if i > 0 && (int.len() - i) % 3 == 0 {
            grouped.push(',');
        }
        grouped.push(ch);
    }
    format!("{}{grouped}.{frac}", if v < 0.0 { "-" } else { "" })
}

fn bounds(cmd: &BoundsCmd) -> Outcome {
    match cmd {
        BoundsCmd::Token { eps, vocab_size } => {
            let b = token_inference_bounds(*eps, *vocab_size)?;
            Ok(format!(
                "eps: {}\nvocab_size: {}\nlower: {:.12e}\nupper: {:.12e}\n",
                b.epsilon, b.vocab_size, b.lower, b.upper
            ))
        }
        BoundsCmd::Prompt {
            eps,
            vocab_size,
            len,
            rho,
            gamma,
        } => {
            let r = prompt_reconstruction_bound(PromptBoundParams {
                epsilon: *eps,
                vocab_size: *vocab_size,
                prompt_len: *len as usize,
                rho: *rho,
                gamma: *gamma,
            })?;
            Ok(format!(
                "eps: {}\nvocab_size: {}\nprompt_len: {}\nrho: {}\ngamma: {}\ncorrect_tokens: {}\nbound: {:.12e}\nlog10_bound: {:.6}\nvacuous: {}\n",
                eps, vocab_size, len, rho, gamma, r.correct_tokens, r.value, r.log10_value, r.vacuous
            ))
        }
        BoundsCmd::Sweep {
            eps,
            vocab_size,
            len,
            rho,
            gamma,
        } => {
            let mut grid = Vec::new();
            for &e in eps {
                for &v in vocab_size {
                    for &l in len {
                        for &r in rho {
                            for &g in gamma {
                                grid.push(PromptBoundParams {
                                    epsilon: e,
                                    vocab_size: v,
                                    prompt_len: l as usize,
                                    rho: r,
                                    gamma: g,
                                });
                            }
                        }
                    }
                }
            }
            Ok(SweepTable(&sweep(&grid)?).to_string())
        }
        BoundsCmd::Years { prob, rate } => {
            let y = brute_force_time(*prob, *rate)?;
            Ok(format!(
                "{}\nprobability: {prob:e}\nrate: {rate}\nexpected_years: {:.6e}\nwithout_half_factor_years: {} ({:.6e})\n",
                thousands(y.expected_years),
                y.expected_years,
                thousands(y.worst_case_years),
                y.worst_case_years
            ))
        }
    }
}

fn attack(cmd: &AttackCmd) -> Outcome {
    match cmd {
        AttackCmd::Bayes { vocab, indvocab, tokens } => {
            let v = load_vocab(vocab)?;
            let ind = load_indvocab(indvocab).with_context(|| format!("loading {}", indvocab.display()))?;
            let attacker = BayesAttacker::new(&v, ind.plan(), ind.policy())?;
            let targets: Vec<usize> = if tokens.is_empty() {
                (0..v.len()).collect()
            } else {
                v.resolve(tokens)?
            };
            let mut out = format!("exact_accuracy: {:.9}\n", attacker.exact_accuracy()?);
            for t in targets {
                let p = attacker.posterior(ind.row(t))?;
                writeln!(out, "\ntoken: {}", v.tokens()[t]).ok();
                writeln!(out, "guess: {}", v.tokens()[p.argmax]).ok();
                writeln!(out, "correct: {}", p.argmax == t).ok();
                let probs: Vec<String> = p.probabilities.iter().map(|x| format!("{x:.6}")).collect();
                writeln!(out, "posterior: {}", probs.join(" ")).ok();
            }
            Ok(out)
        }
        AttackCmd::Game {
            vocab,
            eps_i,
            policy,
            prompts,
            len,
            trials,
            rho,
            uniform,
            seed,
        } => {
            use rand::{Rng, SeedableRng};
            let v = load_vocab(vocab)?;
            let policy = DenominatorPolicy::from(*policy);
            let plan = BudgetPlan::from_per_feature(vec![*eps_i; v.dim()])?;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.seed);
            let prompt_set: Vec<Vec<usize>> = (0..*prompts)
                .map(|_| (0..*len).map(|_| rng.gen_range(0..v.len())).collect())
                .collect();
            let attacker = BayesAttacker::new(&v, &plan, policy)?;
            let guesser = if *uniform {
                Guesser::Uniform { vocab_size: v.len() }
            } else {
                Guesser::Bayes(&attacker)
            };
            let report = reconstruction_game(
                &prompt_set,
                |s| build_indvocab_serial(&v, &plan, s, policy),
                guesser,
                *trials as usize,
                seed.seed,
            )?;
            let eff = measure_effective_epsilon(&v, &plan, policy)?;
            let mut out = format!(
                "attacker: {}\ntrials: {trials}\nprompt_len: {len}\neffective_total_eps: {:.6}\ntoken_accuracy: {:.6}\n",
                if *uniform { "uniform" } else { "bayes" },
                eff.total,
                report.token_accuracy()
            );
            for &r in rho {
                let est = report.success(r);
                let bound = prompt_reconstruction_bound(PromptBoundParams {
                    epsilon: eff.total,
                    vocab_size: v.len() as u64,
                    prompt_len: *len as usize,
                    rho: r,
                    gamma: 0.0,
                })?;
                writeln!(
                    out,
                    "\nrho: {r}\nsuccess: {:.6}\nsigma: {:.6e}\nupper_3sigma: {:.6}\nbound: {:.6e}",
                    est.probability,
                    est.sigma,
                    est.upper_3sigma(),
                    bound.value
                )
                .ok();
            }
            Ok(out)
        }
        AttackCmd::Freq {
            prompts,
            template_len,
            body_len,
            body_tokens,
            top_share,
            k,
            min_support,
            no_mixing,
            seed,
        } => {
            let (tl, bt) = (*template_len as usize, *body_tokens as usize);
            let vocab = synth_vocabulary(tl + bt, 8, seed.seed, 1.0)?;
            let plan = BudgetPlan::from_per_feature(vec![2.0; vocab.dim()])?;
            let ind = build_indvocab(&vocab, &plan, seed.seed.wrapping_add(1), DenominatorPolicy::ExcludeSelf)?;
            let template: Vec<usize> = (0..tl).collect();
            let body: Vec<usize> = (tl..vocab.len()).collect();
            let n = *prompts as usize;
            let private = template_corpus(&template, &body, n, *body_len as usize, *top_share, seed.seed.wrapping_add(2))?;
            let public = template_corpus(&template, &body, n, *body_len as usize, *top_share, seed.seed.wrapping_add(3))?;
            let observations = if *no_mixing {
                raw_observations(&private.prompts, &ind)
            } else {
                let model = ClientModel::random(vocab.dim(), 8, vocab.len(), seed.seed.wrapping_add(4))?;
                encoder_observations(&private.prompts, &ind, &model)?
            };
            let report = frequency_attack(&observations, &public.prompts, *k as usize, *min_support as usize)?;
            let (mut tmpl, mut bodyhits, mut wrong) = (0, 0, 0);
            for r in &report.recovered {
                if private.prompts[r.prompt][r.position] != r.token {
                    wrong += 1;
                } else if r.position < tl {
                    tmpl += 1;
                } else {
                    bodyhits += 1;
                }
            }
            let mut out = format!(
                "observations: {}\nmatched_grams: {}\nrecovered: {}\ncorrect_template_tokens: {tmpl}\ncorrect_body_tokens: {bodyhits}\nwrong: {wrong}\n",
                if *no_mixing { "raw" } else { "encoder" },
                report.matches.len(),
                report.recovered.len()
            );
            for m in &report.matches {
                let names: Vec<&str> = m.tokens.iter().map(|&t| vocab.tokens()[t].as_str()).collect();
                writeln!(out, "\nrank: {}\nsupport: {}\npublic_count: {}\ntokens: {}", m.rank, m.support, m.public_count, names.join(" ")).ok();
            }
            Ok(out)
        }
        AttackCmd::Asr {
            truth,
            recon,
            mode,
            truth_pass,
            recon_pass,
            thresholds,
        } => {
            let truth_text = fs::read_to_string(truth).with_context(|| format!("reading {}", truth.display()))?;
            let truths: Vec<Vec<&str>> = truth_text.lines().filter(|l| !l.trim().is_empty()).map(words).collect();
            let recon_text = fs::read_to_string(recon).with_context(|| format!("reading {}", recon.display()))?;
            let mut recons: Vec<Vec<Vec<&str>>> = vec![Vec::new(); truths.len()];
            let mut owners = Vec::new();
            for (n, line) in recon_text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let (idx, toks) = line.split_once('\t').unwrap_or((line, ""));
                let idx: usize = idx
                    .trim()
                    .parse()
                    .map_err(|_| anyhow!("{} line {}: expected a record index before the tab", recon.display(), n + 1))?;
                let slot = recons
                    .get_mut(idx)
                    .ok_or_else(|| anyhow!("{} line {}: record {idx} out of range", recon.display(), n + 1))?;
                slot.push(words(toks));
                owners.push(idx);
            }
            let t = GameThresholds {
                rho_b: thresholds.rho_b,
                rho_r: thresholds.rho_r,
                rho_f: thresholds.rho_f,
                rho_cb: thresholds.rho_cb,
            };
            t.validate().map_err(|e| Failure::Usage(format!("--rho-*: {e}")))?;
            let report = match mode {
                AsrModeArg::Prompt => compute_asr(&recons, &truths, &t, AsrMode::Prompt)?,
                AsrModeArg::Code => {
                    let tp = PassMatrix::parse(&fs::read_to_string(truth_pass.as_ref().expect("required in code mode"))?)?;
                    let rp = PassMatrix::parse(&fs::read_to_string(recon_pass.as_ref().expect("required in code mode"))?)?;
                    if rp.rows().len() != owners.len() {
                        return Err(usage(
                            "recon-pass",
                            format!("{} rows for {} reconstructions", rp.rows().len(), owners.len()),
                        ));
                    }
                    let mut grouped: Vec<Vec<Vec<bool>>> = vec![Vec::new(); truths.len()];
                    for (row, &owner) in rp.rows().iter().zip(&owners) {
                        grouped[owner].push(row.clone());
                    }
                    compute_asr(
                        &recons,
                        &truths,
                        &t,
                        AsrMode::Code {
                            truth_pass: tp.rows(),
                            recon_pass: &grouped,
                        },
                    )?
                }
            };
            Ok(report.to_string())
        }
    }
}

fn pass_row(flag: &str, s: &str) -> Result<Vec<bool>, Failure> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(usage(flag, format!("expected a 0/1 row, found {other:?}"))),
        })
        .collect()
}

fn stats_block(out: &mut String, name: &str, s: &PerturbationStats) {
    writeln!(out, "{name}_percent_tokens_changed: {:.4}", s.percent_tokens_changed).ok();
    writeln!(out, "{name}_token_strings_changed: {:.4}", s.token_strings_changed).ok();
    writeln!(out, "{name}_mean_l1: {:.6}", s.mean_l1()).ok();
    writeln!(out, "{name}_mean_bigram_cos_change: {:.6}", s.mean_bigram_cos_change()).ok();
    writeln!(out, "{name}_mean_pairwise_cos_change: {:.6}", s.mean_pairwise_cos_change()).ok();
}

fn metrics(cmd: &MetricsCmd) -> Outcome {
    match cmd {
        MetricsCmd::Bleu {
            cand,
            reference,
            n,
            cumulative,
        } => {
            let v = if *cumulative {
                bleu_cumulative(&words(cand), &words(reference), *n as usize)?
            } else {
                bleu(&words(cand), &words(reference), *n as usize)?
            };
            Ok(format!("{v:.6}\n"))
        }
        MetricsCmd::Rouge { cand, reference, n } => Ok(format!("{:.6}\n", rouge_f1(&words(cand), &words(reference), *n as usize)?)),
        MetricsCmd::Crt { truth, recon } => Ok(format!("{:.6}\n", crt(&words(truth), &words(recon))?)),
        MetricsCmd::Leak { truth_code, recon_code } => {
            let t = fs::read_to_string(truth_code).with_context(|| format!("reading {}", truth_code.display()))?;
            let r = fs::read_to_string(recon_code).with_context(|| format!("reading {}", recon_code.display()))?;
            let ids = sensitive_identifiers(&t);
            Ok(format!("leak: {}\nsensitive_identifiers: {}\n", leak(&t, &r), ids.join(" ")))
        }
        MetricsCmd::Fusi { truth, recon } => {
            let score = fusi(&pass_row("truth", truth)?, &pass_row("recon", recon)?)?;
            Ok(format!("{score}\n"))
        }
        MetricsCmd::Passr { n, c, r } => {
            let p = pass_at_r(*n, *c, *r)?;
            Ok(format!("exact: {}\nvalue: {:.9}\n", p.exact, p.value))
        }
        MetricsCmd::Perturb {
            vocab,
            indvocab,
            corpus,
            pairs,
            laplace_eps_i,
            seed,
        } => {
            let v = load_vocab(vocab)?;
            let ind = load_indvocab(indvocab).with_context(|| format!("loading {}", indvocab.display()))?;
            let records = load_corpus(corpus, &v)?;
            let arr = indvocab_perturbation_stats(&v, &ind, &records, *pairs as usize, seed.seed)?;
            let mut out = String::new();
            stats_block(&mut out, "arr", &arr);
            if let Some(e) = laplace_eps_i {
                let scale = laplace_scale_for(&v, *e)?;
                let noisy = laplace_perturb(&v, scale, seed.seed)?;
                let lap = perturbation_stats(&v, &noisy, &records, *pairs as usize, seed.seed)?;
                writeln!(out, "laplace_scale: {scale:.6}").ok();
                stats_block(&mut out, "laplace", &lap);
            }
            Ok(out)
        }
    }
}

fn serve(args: &crate::ServeArgs) -> Outcome {
    let kind = match args.middle {
        MiddleArg::Identity => "identity",
        MiddleArg::Affine => "affine",
        MiddleArg::Attention => "attention",
    };
    let middle = Middle::random(kind, args.dim as usize, args.lora_rank as usize, args.seed.seed)?;
    let listener = TcpListener::bind(&args.addr).with_context(|| format!("binding {}", args.addr))?;
    let local = listener.local_addr()?;
    println!("listening on {local}");
    std::io::stdout().flush()?;
    serve_tcp(listener, ServerConfig::new(middle), Arc::new(AtomicBool::new(false)))?;
    Ok(String::new())
}

struct ClientSetup {
    ind: noir_core::arr::IndVocab,
    perm: TokenPermutation,
    model: ClientModel,
    stream: TcpStream,
}

fn client_setup(a: &ClientArgs) -> Result<ClientSetup, Failure> {
    let ind = load_indvocab(&a.indvocab).with_context(|| format!("loading {}", a.indvocab.display()))?;
    let perm = load_permutation(&a.perm).with_context(|| format!("loading {}", a.perm.display()))?;
    if perm.size() != ind.len() {
        return Err(usage("perm", format!("permutation size {} differs from vocabulary size {}", perm.size(), ind.len())));
    }
    let model = ClientModel::random(ind.dim(), a.dim as usize, ind.len(), a.model_seed)?;
    let stream = TcpStream::connect(&a.addr).with_context(|| format!("connecting to {}", a.addr))?;
    Ok(ClientSetup { ind, perm, model, stream })
}

fn client(cmd: &ClientCmd) -> Outcome {
    match cmd {
        ClientCmd::Generate {
            common,
            prompt,
            max_tokens,
            temperature,
            seed,
        } => {
            let setup = client_setup(common)?;
            let prompt_idx = setup.ind.randomized().resolve(&words(prompt))?;
            let mut session = ClientSession::connect(setup.stream, SessionMode::Inference, &setup.model, false)?;
            let cfg = GenerationConfig {
                temperature: *temperature,
                max_tokens: *max_tokens as usize,
                seed: seed.seed,
            };
            let local = client_generate(&prompt_idx, &setup.ind, &setup.perm, &setup.model, &mut session, &cfg)?;
            let session_id = session.session_id();
            session.close()?;
            let tokens = local
                .iter()
                .map(|&l| setup.perm.inverse(l).map(|t| setup.ind.tokens()[t].clone()))
                .collect::<noir_core::Result<Vec<_>>>()?;
            Ok(format!("session: {session_id}\ngenerated: {}\n", tokens.join(" ")))
        }
        ClientCmd::Tune {
            common,
            corpus,
            rounds,
            lr,
            lora,
        } => {
            let mut setup = client_setup(common)?;
            let records = load_corpus(corpus, setup.ind.randomized())?;
            let mut session = ClientSession::connect(setup.stream, SessionMode::Tuning, &setup.model, *lora)?;
            let mut out = format!("session: {}\nlora: {}\n", session.session_id(), session.ack().lora_enabled);
            for round in 0..*rounds {
                let r = stuning_round(&records, &setup.ind, &setup.perm, &mut setup.model, &mut session, *lr)?;
                writeln!(out, "round {round}: loss {:.6} cloud_updated {}", r.loss, r.cloud_updated).ok();
            }
            session.close()?;
            Ok(out)
        }
    }
}

fn repro(args: &crate::ReproArgs) -> Outcome {
    if args.write_fixtures {
        write_fixtures(&args.fixtures)?;
    }
    let fx = load_fixtures(&args.fixtures)?;
    let ids: Vec<usize> = if args.only.is_empty() {
        (1..=CRITERIA).collect()
    } else {
        args.only.clone()
    };
    if let Some(bad) = ids.iter().find(|&&i| i == 0 || i > CRITERIA) {
        return Err(usage("only", format!("criteria are numbered 1..={CRITERIA}, got {bad}")));
    }
    let criteria = ids.iter().map(|&id| run_criterion(id, &fx)).collect::<noir_core::Result<Vec<_>>>()?;
    let report = ReproReport { criteria };
    let text = report.to_string();
    if report.passed() {
        Ok(text)
    } else {
        Err(Failure::Domain {
            error: anyhow!("criteria failed: {:?}", report.failures()),
            report: Some(text),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::thousands;

    #[test]
    fn thousands_grouping() {
        assert_eq!(thousands(3308.6652), "3,308.67");
        assert_eq!(thousands(1234567.891), "1,234,567.89");
        assert_eq!(thousands(12.0), "12.00");
        assert_eq!(thousands(-1000.0), "-1,000.00");
    }
}
