use noir_core::adversary::BayesAttacker;
use noir_core::arr::{
    arr_probabilities, build_indvocab, build_indvocab_serial, load_indvocab, save_indvocab, BudgetPlan,
    DenominatorPolicy,
};
use noir_core::bounds::{prompt_reconstruction_bound, token_inference_bounds, PromptBoundParams};
use noir_core::ltok::TokenPermutation;
use noir_core::metrics::{bleu_cumulative, crt, rouge_f1};
use noir_core::protocol::{Frame, Message, Tensor};
use noir_core::vocab::{load_vocabulary, save_vocabulary, synth_vocabulary};
use proptest::prelude::*;

fn policy() -> impl Strategy<Value = DenominatorPolicy> {
    prop_oneof![Just(DenominatorPolicy::ExcludeSelf), Just(DenominatorPolicy::IncludeSelf)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cell_distribution_is_normalized(seed in 0u64..1000, size in 3usize..12, eps in 1.0f64..8.0, p in policy()) {
        let v = synth_vocabulary(size, 2, seed, 0.5).unwrap();
        for t in 0..size {
            let d = arr_probabilities(&v, t, 0, eps, p).unwrap();
            prop_assert!((d.total() - 1.0).abs() < 1e-9);
            prop_assert!(d.keep() >= d.max_replacement());
        }
    }

    #[test]
    fn posterior_is_a_distribution(seed in 0u64..1000, eps in 1.0f64..6.0, p in policy()) {
        let v = synth_vocabulary(5, 2, seed, 0.5).unwrap();
        let plan = BudgetPlan::from_per_feature(vec![eps; 2]).unwrap();
        let ind = build_indvocab(&v, &plan, seed ^ 7, p).unwrap();
        let attacker = BayesAttacker::new(&v, &plan, p).unwrap();
        for t in 0..v.len() {
            let post = attacker.posterior(ind.row(t)).unwrap();
            let total: f64 = post.probabilities.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(post.probabilities.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!(post.probabilities[post.argmax] >= post.probabilities.iter().cloned().fold(0.0, f64::max));
        }
    }

    #[test]
    fn parallel_and_serial_builds_agree(seed in 0u64..1000, size in 3usize..20) {
        let v = synth_vocabulary(size, 3, seed, 1.0).unwrap();
        let plan = BudgetPlan::from_per_feature(vec![4.0; 3]).unwrap();
        let a = build_indvocab(&v, &plan, seed, DenominatorPolicy::ExcludeSelf).unwrap();
        let b = build_indvocab_serial(&v, &plan, seed, DenominatorPolicy::ExcludeSelf).unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn permutation_is_a_bijection(size in 2usize..500, seed in any::<u64>()) {
        let perm = TokenPermutation::generate(size, seed).unwrap();
        let mut seen = vec![false; size];
        for t in 0..size {
            let local = perm.forward(t).unwrap();
            prop_assert!(!seen[local]);
            seen[local] = true;
            prop_assert_eq!(perm.inverse(local).unwrap(), t);
        }
        prop_assert!(perm.forward(size).is_err());
        prop_assert_eq!(TokenPermutation::from_bytes(&perm.to_bytes()).unwrap(), perm);
    }

    #[test]
    fn tensor_frames_round_trip(n in 0usize..6, d in 1usize..6, session in any::<u64>(), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1e6f32..1e6)).collect();
        let msg = Message::Emb(Tensor::new(n, d, data).unwrap());
        let bytes = msg.to_frame(session).encode().unwrap();
        let frame = Frame::decode(&bytes).unwrap();
        prop_assert_eq!(frame.session_id, session);
        prop_assert_eq!(Message::from_frame(&frame).unwrap(), msg);
        prop_assert!(Frame::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn overlap_metrics_are_bounded(
        cand in proptest::collection::vec(0u8..6, 1..20),
        reference in proptest::collection::vec(0u8..6, 1..20),
    ) {
        let b = bleu_cumulative(&cand, &reference, 4).unwrap();
        prop_assert!((0.0..=100.0).contains(&b));
        let r = rouge_f1(&cand, &reference, 1).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        let c = crt(&reference, &cand).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
        if reference.len() >= 4 {
            prop_assert!((bleu_cumulative(&reference, &reference, 4).unwrap() - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn token_bounds_are_ordered(eps in 0.0f64..30.0, size in 2u64..1_000_000) {
        let b = token_inference_bounds(eps, size).unwrap();
        prop_assert!(b.lower <= 1.0 / size as f64 + 1e-15);
        prop_assert!(b.upper >= 1.0 / size as f64 - 1e-15);
        prop_assert!(b.lower <= b.upper && b.upper < 1.0 + 1e-15);
    }

    #[test]
    fn prompt_bound_decreases_with_rho(eps in 0.1f64..10.0, len in 4usize..64) {
        let at = |rho: f64| prompt_reconstruction_bound(PromptBoundParams {
            epsilon: eps, vocab_size: 1000, prompt_len: len, rho, gamma: 0.0,
        }).unwrap().value;
        let (lo, hi) = (at(0.25), at(1.0));
        prop_assert!(hi <= lo + 1e-300);
        prop_assert!((0.0..=1.0).contains(&lo));
    }
}

#[test]
fn vocabulary_and_indvocab_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v = synth_vocabulary(9, 4, 5, 0.5).unwrap();
    let plan = BudgetPlan::uniform(20.0, 4).unwrap();
    let ind = build_indvocab(&v, &plan, 3, DenominatorPolicy::IncludeSelf).unwrap();
    save_vocabulary(&v, dir.path().join("v.bin")).unwrap();
    save_indvocab(&ind, dir.path().join("i.bin")).unwrap();
    let v2 = load_vocabulary(dir.path().join("v.bin")).unwrap();
    let ind2 = load_indvocab(dir.path().join("i.bin")).unwrap();
    assert_eq!(v2, v);
    assert_eq!(ind2.to_bytes(), ind.to_bytes());
    assert!(ind2.audit_against(&v2).ok());
}
