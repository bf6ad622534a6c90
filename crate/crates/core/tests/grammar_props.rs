use std::collections::{HashMap, HashSet};

use memlab_core::grammar::{count_total_data_u128, Grammar, GrammarParams, TokenSequence};
use memlab_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn small_params() -> impl Strategy<Value = GrammarParams> {
    (2usize..=4, 1usize..=3, 1usize..=3, 2usize..=3, any::<u64>())
        .prop_filter("unambiguous", |&(v, m, _, s, _)| m * v <= v.pow(s as u32))
        .prop_filter("enumerable", |&(v, m, l, s, _)| {
            count_total_data_u128(&GrammarParams::new(v, m, l, s, 0)).is_some_and(|c| c <= 10_000)
        })
        .prop_map(|(v, m, l, s, seed)| GrammarParams::new(v, m, l, s, seed))
}

fn chi_square_p(observed: &[u64], expected: f64) -> f64 {
    let stat: f64 = observed.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((observed.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn productions_are_distinct_and_invertible(p in small_params()) {
        let g = Grammar::build(p).unwrap();
        for layer in 0..p.depth {
            let mut seen = HashSet::new();
            for a in 0..p.vocab as u32 {
                for k in 0..p.synonyms {
                    let prod = g.production(layer, a, k).to_vec();
                    prop_assert!(seen.insert(prod.clone()));
                    prop_assert_eq!(g.lookup(layer, &prod), Some(a * p.synonyms as u32 + k as u32));
                }
            }
        }
    }

    #[test]
    fn parse_inverts_sampling(p in small_params(), seed in any::<u64>()) {
        let g = Grammar::build(p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = g.sample_tree(&mut rng);
        let parsed = g.parse(&tree.leaves()).unwrap();
        prop_assert_eq!(parsed, tree);
    }

    #[test]
    fn count_matches_enumeration(p in small_params()) {
        let g = Grammar::build(p).unwrap();
        let all = g.enumerate(10_000).unwrap();
        let distinct: HashSet<_> = all.iter().cloned().collect();
        prop_assert_eq!(distinct.len(), all.len());
        prop_assert_eq!(all.len() as u128, count_total_data_u128(&p).unwrap());
        for x in &all {
            prop_assert!(g.validate_layers(x).iter().all(|&ok| ok));
        }
    }

    #[test]
    fn strict_validity_is_monotone(p in small_params(), seed in any::<u64>()) {
        let g = Grammar::build(p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = TokenSequence::new((0..p.dim()).map(|_| rng.random_range(0..p.vocab as u32)).collect());
        let valid = g.validate_layers(&x);
        for w in valid.windows(2) {
            prop_assert!(w[0] || !w[1]);
        }
        let frac = g.layer_validity_fractions(&x);
        for (ok, f) in valid.iter().zip(&frac) {
            prop_assert!((0.0..=1.0).contains(f));
            if *ok {
                prop_assert_eq!(*f, 1.0);
            }
        }
    }
}

#[test]
fn build_rejects_ambiguous_params() {
    assert!(matches!(Grammar::build(GrammarParams::new(2, 3, 2, 2, 0)), Err(Error::Ambiguous { .. })));
}

#[test]
fn two_string_grammar_is_sampled_evenly() {
    let g = Grammar::build(GrammarParams::new(2, 1, 2, 2, 0)).unwrap();
    let all = g.enumerate(10).unwrap();
    assert_eq!(all.len(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let hits = (0..n).filter(|_| g.sample_datum(&mut rng) == all[0]).count() as f64;
    let sd = (n as f64 * 0.25).sqrt();
    assert!((hits - 0.5 * n as f64).abs() < 3.0 * sd);
}

#[test]
fn sampling_is_uniform_over_strings() {
    // 3 * 2^3 = 24 strings.
    let g = Grammar::build(GrammarParams::new(3, 2, 2, 2, 4)).unwrap();
    let all = g.enumerate(100).unwrap();
    let index: HashMap<_, _> = all.iter().enumerate().map(|(i, x)| (x.clone(), i)).collect();
    let mut counts = vec![0u64; all.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 100_000;
    for _ in 0..n {
        counts[index[&g.sample_datum(&mut rng)]] += 1;
    }
    assert!(chi_square_p(&counts, n as f64 / all.len() as f64) > 0.01);
}

#[test]
fn full_dataset_equals_enumeration() {
    let g = Grammar::build(GrammarParams::new(3, 2, 2, 2, 4)).unwrap();
    let all: HashSet<_> = g.enumerate(100).unwrap().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = g.sample_dataset(all.len(), &mut rng).unwrap();
    assert_eq!(data.to_set(), all);
    assert!(g.sample_dataset(0, &mut rng).unwrap().is_empty());
    assert!(matches!(g.sample_dataset(all.len() + 1, &mut rng), Err(Error::NotEnoughData { .. })));
}

#[test]
fn random_strings_pass_layer_one_at_closed_form_rate() {
    // v=4, m=2, s=2: each block valid with probability m v / v^s = 1/2; d/s = 4 blocks.
    let g = Grammar::build(GrammarParams::new(4, 2, 3, 2, 5)).unwrap();
    let p = 0.5f64.powi(4);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 100_000;
    let hits = (0..n)
        .filter(|_| {
            let x = TokenSequence::new((0..8).map(|_| rng.random_range(0..4)).collect());
            g.validate_layers(&x)[0]
        })
        .count() as f64;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((hits - n as f64 * p).abs() < 3.0 * sd, "{hits} vs {}", n as f64 * p);
}

#[test]
fn substitution_breaks_first_layer() {
    let g = Grammar::build(GrammarParams::new(4, 2, 2, 2, 8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = g.sample_datum(&mut rng);
    let mut found = false;
    for tok in 0..4 {
        let mut y = x.clone().into_inner();
        y[0] = tok;
        if g.lookup(0, &y[0..2]).is_none() {
            assert!(!g.validate_layers(&TokenSequence::new(y))[0]);
            found = true;
        }
    }
    assert!(found);
}
