use std::collections::BTreeSet;

use icl_lab::corpus::{build_action_vocabulary, build_corpus, CorpusConfig, Partition};
use icl_lab::evaluation::{derangement, lcs_len, ols, rouge_l, MeanSe};
use icl_lab::model::Tokenizer;
use icl_lab::sampling::{sample_bursty_context, sample_random_context, CorpusIndex};
use icl_lab::seed::rng_from_seed;
use proptest::prelude::*;

/// Longest common subsequence by trying every subsequence of `a`.
fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let is_subseq = |s: &[u8]| {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let s: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            is_subseq(&s).then_some(s.len())
        })
        .max()
        .unwrap_or(0)
}

fn tokens() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..5, 0..=10)
}

proptest! {
    #[test]
    fn lcs_matches_exhaustive_search(a in tokens(), b in tokens()) {
        prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
    }

    #[test]
    fn rouge_f1_is_symmetric_and_bounded(a in tokens(), b in tokens()) {
        let ab = rouge_l(&a, &b);
        let ba = rouge_l(&b, &a);
        prop_assert_eq!(ab.f1, ba.f1);
        prop_assert_eq!(ab.precision, ba.recall);
        prop_assert!((0.0..=1.0).contains(&ab.f1));
        if !a.is_empty() {
            prop_assert_eq!(rouge_l(&a, &a).f1, 1.0);
        }
    }

    #[test]
    fn derangements_are_fixed_point_free_permutations(n in 2usize..40, seed: u64) {
        let p = derangement(n, &mut rng_from_seed(seed));
        prop_assert!(p.iter().enumerate().all(|(i, &j)| i != j));
        prop_assert_eq!(p.iter().copied().collect::<BTreeSet<_>>().len(), n);
    }

    #[test]
    fn mean_lies_within_range(xs in prop::collection::vec(-1e3f64..1e3, 1..50)) {
        let m = MeanSe::of(&xs);
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m.mean >= lo - 1e-9 && m.mean <= hi + 1e-9);
        prop_assert!(m.se >= 0.0);
    }

    #[test]
    fn ols_recovers_exact_lines(a in -5.0f64..5.0, b in -5.0f64..5.0, xs in prop::collection::btree_set(-100i32..100, 3..20)) {
        let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|x| a + b * x).collect();
        let r = ols(&xs, &ys).unwrap();
        prop_assert!((r.slope - b).abs() < 1e-9);
        prop_assert!((r.intercept - a).abs() < 1e-7);
        if !r.zero_variance {
            prop_assert!((r.r_squared - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zipf_frequencies_are_a_decreasing_distribution(n in 1usize..60, s in 0.0f64..3.0, seed: u64) {
        let v = build_action_vocabulary(8, 8, n, s, seed).unwrap();
        prop_assert!((v.frequency.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(v.frequency.windows(2).all(|w| w[0] >= w[1]));
        prop_assert_eq!(v.actions.iter().collect::<BTreeSet<_>>().len(), n);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn contexts_respect_their_sampling_mode(seed: u64, c in 1usize..12) {
        let corpus = build_corpus(&CorpusConfig {
            num_verbs: 6,
            num_nouns: 6,
            num_actions: 24,
            common_episodes: 600,
            rare_episodes: 60,
            prototype_dim: 2,
            frames: 1,
            seed,
            ..CorpusConfig::default()
        })
        .unwrap();
        let train: Vec<_> = corpus.partition(Partition::Train).collect();
        let index = CorpusIndex::new(train.iter().copied());
        let mut rng = rng_from_seed(seed ^ 7);
        for q in train.iter().take(20) {
            if let Ok(ctx) = sample_bursty_context(q, &index, c, &mut rng) {
                let verb = ctx.iter().filter(|&&id| {
                    let a = index.action(id).unwrap();
                    a.verb == q.action.verb && a.noun != q.action.noun
                }).count();
                let noun = ctx.iter().filter(|&&id| {
                    let a = index.action(id).unwrap();
                    a.noun == q.action.noun && a.verb != q.action.verb
                }).count();
                prop_assert_eq!(verb, c.div_ceil(2));
                prop_assert_eq!(noun, c / 2);
                prop_assert!(!ctx.contains(&q.id));
            }
            let ctx = sample_random_context(q, &index, c, &mut rng).unwrap();
            prop_assert_eq!(ctx.len(), c);
            prop_assert_eq!(ctx.iter().collect::<BTreeSet<_>>().len(), c);
            prop_assert!(!ctx.contains(&q.id));
        }
    }

    #[test]
    fn tokenizer_round_trips_lexicon_words(seed: u64) {
        let corpus = build_corpus(&CorpusConfig {
            num_verbs: 5,
            num_nouns: 5,
            num_actions: 10,
            common_episodes: 50,
            rare_episodes: 10,
            prototype_dim: 2,
            frames: 1,
            seed,
            ..CorpusConfig::default()
        })
        .unwrap();
        let tok = Tokenizer::new([&corpus.lexicon]);
        let words: Vec<String> = corpus.lexicon.words().into_iter().collect();
        let ids = tok.encode(&words.join(" ")).unwrap();
        prop_assert_eq!(tok.decode(&ids), words);
    }
}
