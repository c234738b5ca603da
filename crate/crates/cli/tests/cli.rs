use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_noir");
const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures");

fn noir(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("NOIR_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn field(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .to_string()
}

fn fixture_vocab(dir: &Path) {
    let o = noir(dir, &["vocab", "gen", "--size", "6", "--dim", "3", "--scale", "0.5", "--seed", "42", "--out", "v.bin"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn years_for_eight_lowercase_letters() {
    let dir = tempfile::tempdir().unwrap();
    let o = noir(dir.path(), &["bounds", "years", "--prob", "26^-8", "--rate", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let first = stdout(&o).lines().next().unwrap().replace(',', "");
    let years: f64 = first.parse().unwrap();
    assert!((years - 3308.65).abs() <= 0.1, "{years}");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(noir(dir.path(), &["nosuch"]).status.code(), Some(2));
    let o = noir(dir.path(), &["bounds", "token", "--eps", "-1", "--vocab-size", "6"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--eps") && stderr(&o).contains(">= 0"), "{}", stderr(&o));
    let o = noir(dir.path(), &["bounds", "prompt", "--eps", "1", "--vocab-size", "6", "--len", "8", "--rho", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--rho"));
}

#[test]
fn randomized_commands_require_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = noir(dir.path(), &["vocab", "gen", "--size", "6", "--dim", "3", "--out", "v.bin"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--seed"));
    let with_env = Command::new(BIN)
        .args(["vocab", "gen", "--size", "6", "--dim", "3", "--scale", "0.5", "--out", "w.bin"])
        .current_dir(dir.path())
        .env("NOIR_SEED", "42")
        .output()
        .unwrap();
    assert!(with_env.status.success());
    fixture_vocab(dir.path());
    assert_eq!(fs::read(dir.path().join("v.bin")).unwrap(), fs::read(dir.path().join("w.bin")).unwrap());
}

#[test]
fn infeasible_budget_exits_one_with_minimal_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    fixture_vocab(dir.path());
    let o = noir(dir.path(), &["indvocab", "build", "--vocab", "v.bin", "--eps", "0.0000001", "--seed", "1", "--out", "i.bin"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("minimal feasible total eps = 0.66"), "{}", stderr(&o));
    assert!(!dir.path().join("i.bin").exists());
}

#[test]
fn identical_arguments_give_identical_output() {
    let dir = tempfile::tempdir().unwrap();
    fixture_vocab(dir.path());
    let run = |out: &str| {
        let o = noir(dir.path(), &["indvocab", "build", "--vocab", "v.bin", "--eps", "3", "--seed", "7", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o).replace(out, "OUT")
    };
    assert_eq!(run("a.bin"), run("b.bin"));
    assert_eq!(fs::read(dir.path().join("a.bin")).unwrap(), fs::read(dir.path().join("b.bin")).unwrap());
    let fixture = fs::read(Path::new(FIXTURES).join("indvocab.bin")).unwrap();
    assert_eq!(fs::read(dir.path().join("a.bin")).unwrap(), fixture);
}

#[test]
fn audit_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    fixture_vocab(dir.path());
    let ok = noir(dir.path(), &["indvocab", "build", "--vocab", "v.bin", "--eps", "3", "--seed", "7", "--out", "i.bin"]);
    assert!(ok.status.success());
    let o = noir(dir.path(), &["indvocab", "audit", "--vocab", "v.bin", "--indvocab", "i.bin"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(field(&stdout(&o), "audit"), "ok");
    assert!(field(&stdout(&o), "effective_total_eps").parse::<f64>().unwrap() > 3.0);

    let path = dir.path().join("i.bin");
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&path, bytes).unwrap();
    let o = noir(dir.path(), &["indvocab", "audit", "--vocab", "v.bin", "--indvocab", "i.bin"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(field(&stdout(&o), "audit"), "failed");
}

#[test]
fn config_fills_missing_flags_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("b.cfg"), "# anchors\neps = 13\nvocab_size = 151000\nlen = 200\nrho = 0.2\ngamma = 0.146\n").unwrap();
    let o = noir(dir.path(), &["--config", "b.cfg", "bounds", "prompt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(field(&stdout(&o), "correct_tokens"), "40");
    let o = noir(dir.path(), &["bounds", "prompt", "--rho", "0.4", "--config", "b.cfg"]);
    assert_eq!(field(&stdout(&o), "correct_tokens"), "80");
    assert!(field(&stdout(&o), "bound").parse::<f64>().unwrap() < 5.5e-11);
    fs::write(dir.path().join("bad.cfg"), "eps\n").unwrap();
    assert_eq!(noir(dir.path(), &["--config", "bad.cfg", "bounds", "prompt"]).status.code(), Some(2));
}

#[test]
fn metrics_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let o = noir(dir.path(), &["metrics", "bleu", "--cand", "a b x y", "--ref", "a b c d"]);
    assert_eq!(stdout(&o).trim(), "50.000000");
    let o = noir(dir.path(), &["metrics", "rouge", "--cand", "a b", "--ref", "a b c d"]);
    assert_eq!(stdout(&o).trim(), "0.666667");
    let o = noir(dir.path(), &["metrics", "crt", "--truth", "a b c d", "--recon", "d c x x"]);
    assert_eq!(stdout(&o).trim(), "0.500000");
    let o = noir(dir.path(), &["metrics", "fusi", "--truth", "00", "--recon", "11"]);
    assert_eq!(stdout(&o).trim(), "undefined");
    let o = noir(dir.path(), &["metrics", "fusi", "--truth", "1x", "--recon", "11"]);
    assert_eq!(o.status.code(), Some(2));
    let o = noir(dir.path(), &["metrics", "passr", "--n", "6", "--c", "2", "--r", "3"]);
    assert_eq!(field(&stdout(&o), "exact"), "4/5");
    fs::write(dir.path().join("t.py"), "def transfer_funds(acct):\n    return acct\n").unwrap();
    fs::write(dir.path().join("r.py"), "def transfer_funds(x):\n    pass\n").unwrap();
    let o = noir(dir.path(), &["metrics", "leak", "--truth-code", "t.py", "--recon-code", "r.py"]);
    assert_eq!(field(&stdout(&o), "leak"), "true");
}

#[test]
fn perturb_compares_against_laplace() {
    let dir = tempfile::tempdir().unwrap();
    fixture_vocab(dir.path());
    assert!(noir(dir.path(), &["indvocab", "build", "--vocab", "v.bin", "--eps", "3", "--seed", "7", "--out", "i.bin"]).status.success());
    fs::copy(Path::new(FIXTURES).join("corpus.txt"), dir.path().join("c.txt")).unwrap();
    let o = noir(
        dir.path(),
        &["metrics", "perturb", "--vocab", "v.bin", "--indvocab", "i.bin", "--corpus", "c.txt", "--laplace-eps-i", "1", "--seed", "3"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let arr: f64 = field(&stdout(&o), "arr_mean_l1").parse().unwrap();
    let lap: f64 = field(&stdout(&o), "laplace_mean_l1").parse().unwrap();
    assert!(arr < lap, "{arr} vs {lap}");
}

#[test]
fn attack_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    fixture_vocab(dir.path());
    assert!(noir(dir.path(), &["indvocab", "build", "--vocab", "v.bin", "--eps", "150", "--seed", "7", "--out", "i.bin"]).status.success());
    let o = noir(dir.path(), &["attack", "bayes", "--vocab", "v.bin", "--indvocab", "i.bin", "--tokens", "tok0003"]);
    assert_eq!(field(&stdout(&o), "guess"), "tok0003");
    assert!(field(&stdout(&o), "exact_accuracy").parse::<f64>().unwrap() > 0.99);

    let o = noir(
        dir.path(),
        &["attack", "game", "--vocab", "v.bin", "--eps-i", "1", "--trials", "2000", "--rho", "1", "--seed", "5"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let success: f64 = field(&stdout(&o), "success").parse().unwrap();
    let bound: f64 = field(&stdout(&o), "bound").parse().unwrap();
    assert!(success <= bound, "{success} vs {bound}");

    let o = noir(dir.path(), &["attack", "freq", "--prompts", "200", "--seed", "1"]);
    assert_eq!(field(&stdout(&o), "correct_body_tokens"), "0");
    assert!(field(&stdout(&o), "correct_template_tokens").parse::<usize>().unwrap() > 0);
    let o = noir(dir.path(), &["attack", "freq", "--prompts", "200", "--top-share", "0.6", "--no-mixing", "--seed", "1"]);
    assert!(field(&stdout(&o), "correct_body_tokens").parse::<usize>().unwrap() > 0);

    fs::write(dir.path().join("truth.txt"), "a b c d\nw x y z\n").unwrap();
    fs::write(dir.path().join("recon.txt"), "0\ta b c d\n1\tq q q q\n1\tq r s t\n").unwrap();
    let o = noir(dir.path(), &["attack", "asr", "--truth", "truth.txt", "--recon", "recon.txt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(field(&stdout(&o), "asr_privacy"), "0.500000");
    fs::write(dir.path().join("tp.txt"), "11\n00\n").unwrap();
    fs::write(dir.path().join("rp.txt"), "11\n11\n00\n").unwrap();
    let o = noir(
        dir.path(),
        &["attack", "asr", "--truth", "truth.txt", "--recon", "recon.txt", "--mode", "code", "--truth-pass", "tp.txt", "--recon-pass", "rp.txt"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(field(&stdout(&o), "asr_functionality"), "1.000000");
    assert_eq!(field(&stdout(&o), "functionality_records"), "1");
    let o = noir(dir.path(), &["attack", "asr", "--truth", "truth.txt", "--recon", "recon.txt", "--mode", "code"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn serve_and_client_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    fixture_vocab(dir.path());
    assert!(noir(dir.path(), &["indvocab", "build", "--vocab", "v.bin", "--eps", "3", "--seed", "7", "--out", "i.bin"]).status.success());
    assert!(noir(dir.path(), &["ltok", "gen", "--vocab", "v.bin", "--seed", "11", "--out", "p.bin"]).status.success());
    fs::copy(Path::new(FIXTURES).join("corpus.txt"), dir.path().join("c.txt")).unwrap();

    let mut server = Command::new(BIN)
        .args(["serve", "--addr", "127.0.0.1:0", "--dim", "8", "--middle", "attention", "--lora-rank", "2", "--seed", "3"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();

    let common = ["--addr", addr.as_str(), "--indvocab", "i.bin", "--perm", "p.bin", "--dim", "8"];
    let mut args = vec!["client", "generate"];
    args.extend(common);
    args.extend(["--prompt", "tok0001 tok0002", "--max-tokens", "4", "--seed", "1"]);
    let first = noir(dir.path(), &args);
    let second = noir(dir.path(), &args);
    assert!(first.status.success(), "{}", stderr(&first));
    let generated = field(&stdout(&first), "generated");
    assert_eq!(generated.split(' ').count(), 4);
    assert_eq!(generated, field(&stdout(&second), "generated"));

    let mut args = vec!["client", "tune"];
    args.extend(common);
    args.extend(["--corpus", "c.txt", "--rounds", "3", "--lora"]);
    let o = noir(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("round ")).count(), 3);

    let o = noir(
        dir.path(),
        &["client", "generate", "--addr", &addr, "--indvocab", "i.bin", "--perm", "p.bin", "--dim", "4", "--prompt", "tok0001", "--seed", "1"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Dims"));
    server.kill().unwrap();
    server.wait().unwrap();
}

#[test]
fn repro_subset_and_missing_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let o = noir(dir.path(), &["repro", "--fixtures", FIXTURES, "--only", "2,5,9", "-o", "report.txt"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(report.contains("summary: 3/3 criteria passed"));
    let o = noir(dir.path(), &["repro", "--fixtures", "absent"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing fixture"));
    let o = noir(dir.path(), &["repro", "--fixtures", FIXTURES, "--only", "12"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tampered_fixture_fails_repro() {
    let dir = tempfile::tempdir().unwrap();
    let o = noir(dir.path(), &["repro", "--fixtures", "fx", "--write-fixtures", "--only", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let path = dir.path().join("fx/indvocab.bin");
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&path, bytes).unwrap();
    let o = noir(dir.path(), &["repro", "--fixtures", "fx", "--only", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL stored IndVocab audit"));
}
