//! One test per acceptance criterion. Each prints its PASS/FAIL line with the measured values.

use std::fs;

use noir_core::arr::{load_indvocab, IndVocab};
use noir_core::repro::{
    generate_fixtures, load_fixtures, run_criterion, run_reproduction_suite, write_fixtures, Fixtures, INDVOCAB_FIXTURE,
};
use noir_core::Error;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");

fn fixtures() -> Fixtures {
    load_fixtures(FIXTURES).expect("checked-in fixtures")
}

fn criterion(id: usize) {
    let result = run_criterion(id, &fixtures()).unwrap();
    print!("{result}");
    let first = result.to_string().lines().next().unwrap_or_default().to_string();
    assert!(result.passed(), "{first}");
}

#[test]
fn criterion_01_exact_eps_ind_audit() {
    criterion(1);
}

#[test]
fn criterion_02_arr_normalization_and_dominance() {
    criterion(2);
}

#[test]
fn criterion_03_posterior_containment() {
    criterion(3);
}

#[test]
fn criterion_04_bound_dominance_by_monte_carlo() {
    criterion(4);
}

#[test]
fn criterion_05_closed_form_anchors() {
    criterion(5);
}

#[test]
fn criterion_06_ltokenizer_bijection_and_uniformity() {
    criterion(6);
}

#[test]
fn criterion_07_metric_oracles() {
    criterion(7);
}

#[test]
fn criterion_08_split_matches_monolithic() {
    criterion(8);
}

#[test]
fn criterion_09_wire_contract() {
    criterion(9);
}

#[test]
fn criterion_10_frequency_attack() {
    criterion(10);
}

#[test]
fn criterion_11_attacker_monotonicity() {
    criterion(11);
}

#[test]
fn checked_in_fixtures_match_generator() {
    assert_eq!(fixtures(), generate_fixtures().unwrap());
}

#[test]
fn tampered_indvocab_fails_the_audit() {
    let dir = tempfile::tempdir().unwrap();
    write_fixtures(dir.path()).unwrap();
    let path = dir.path().join(INDVOCAB_FIXTURE);
    let original = load_indvocab(&path).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    // Flip one bit of the last stored feature value.
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    fs::write(&path, &bytes).unwrap();
    let tampered: IndVocab = load_indvocab(&path).unwrap();
    assert_ne!(tampered, original);

    let fx = load_fixtures(dir.path()).unwrap();
    let result = run_criterion(1, &fx).unwrap();
    let audit = result.checks.iter().find(|c| c.name == "stored IndVocab audit").unwrap();
    assert!(!audit.passed, "{}", audit.measured);
    assert!(!result.passed());
}

#[test]
fn missing_fixture_directory_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(run_reproduction_suite(dir.path().join("absent")), Err(Error::MissingFixture(_))));
}
