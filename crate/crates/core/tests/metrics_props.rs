use memlab_core::metrics::{
    classify_regime, copy_fraction, detect_tau_mem, error_fraction_per_layer, hellinger, mean_nn_hamming,
    model_distance, rule_statistics, ErrorMode, ProbeSet, RegimeLabel, RegimeThresholds,
};
use memlab_core::noise::{KernelKind, NoiseSchedule};
use memlab_core::{BpOracle, Dataset, Grammar, GrammarParams, TokenSequence, UniformPredictor, X0Predictor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero", |w| {
        let z: f64 = w.iter().sum();
        (z > 1e-6).then(|| w.iter().map(|x| x / z).collect())
    })
}

fn strings(n: usize, d: usize, v: u32) -> impl Strategy<Value = Vec<TokenSequence>> {
    prop::collection::vec(prop::collection::vec(0..v, d).prop_map(TokenSequence::new), 1..n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn hellinger_is_a_bounded_metric(p in simplex(5), q in simplex(5), r in simplex(5)) {
        let pq = hellinger(&p, &q).unwrap();
        prop_assert!((0.0..=1.0).contains(&pq));
        prop_assert!((pq - hellinger(&q, &p).unwrap()).abs() < 1e-15);
        let pr = hellinger(&p, &r).unwrap();
        let qr = hellinger(&q, &r).unwrap();
        prop_assert!(pr <= pq + qr + 1e-9);
    }

    #[test]
    fn copy_metrics_are_fractions(gen in strings(20, 6, 3), train in strings(20, 6, 3)) {
        let mut uniq = train.clone();
        uniq.sort();
        uniq.dedup();
        let train = Dataset::new(uniq).unwrap();
        let h = mean_nn_hamming(&gen, &train).unwrap();
        let c = copy_fraction(&gen, &train, 0.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&h));
        prop_assert!((0.0..=1.0).contains(&c));
        // An exact copy has distance zero.
        prop_assert!(c == 0.0 || h < 1.0);
        let loose = copy_fraction(&gen, &train, 0.5).unwrap();
        prop_assert!(loose >= c);
    }

    #[test]
    fn larger_margin_never_detects_earlier(vals in prop::collection::vec(0.1f64..2.0, 3..40), d1 in 0.0f64..0.5, d2 in 0.0f64..0.5) {
        let taus: Vec<u64> = (1..=vals.len() as u64).collect();
        let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        let a = detect_tau_mem(&taus, &vals, lo, 3);
        let b = detect_tau_mem(&taus, &vals, hi, 3);
        if let Some(tb) = b {
            prop_assert!(a.is_some_and(|ta| ta <= tb));
        }
    }

    #[test]
    fn regime_labels_partition(errs in prop::collection::vec(0.0f64..=1.0, 1..6), copy in 0.0f64..=1.0) {
        let th = RegimeThresholds::default();
        let label = classify_regime(&errs, copy, th);
        let mem = copy > th.copy;
        let full = !mem && errs.iter().all(|&e| e < th.error);
        prop_assert_eq!(label == RegimeLabel::Memorization, mem);
        prop_assert_eq!(label == RegimeLabel::FullGeneralization, full);
        if let RegimeLabel::PartialGeneralization(l) = label {
            prop_assert!(l >= 1 && l < errs.len());
            prop_assert!(errs[..l].iter().all(|&e| e < th.error) && errs[l] >= th.error);
        }
    }
}

#[test]
fn uniform_strings_have_closed_form_layer_one_error() {
    let g = Grammar::build(GrammarParams::new(4, 2, 3, 2, 5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 20_000;
    let gen: Vec<_> = (0..n)
        .map(|_| TokenSequence::new((0..8).map(|_| rng.random_range(0..4)).collect()))
        .collect();
    let e = error_fraction_per_layer(&g, &gen, ErrorMode::Strict);
    let want = 1.0 - 0.5f64.powi(4);
    let sd = (want * (1.0 - want) / n as f64).sqrt();
    assert!((e[0] - want).abs() < 3.0 * sd);
    assert!(e.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn scrambled_level_one_symbols_break_layer_two_only() {
    let g = Grammar::build(GrammarParams::new(8, 2, 3, 2, 9)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 2000;
    let gen: Vec<_> = (0..n)
        .map(|_| {
            // Independent level-1 symbols, each expanded with a valid production.
            let mut x = Vec::with_capacity(8);
            for _ in 0..4 {
                let a = rng.random_range(0..8);
                let k = rng.random_range(0..2);
                x.extend_from_slice(g.production(0, a, k));
            }
            TokenSequence::new(x)
        })
        .collect();
    let e = error_fraction_per_layer(&g, &gen, ErrorMode::Strict);
    assert_eq!(e[0], 0.0);
    // Each of the two level-1 pairs is a production with probability 1/4.
    let want = 1.0 - 0.25f64.powi(2);
    assert!((e[1] - want).abs() < 0.05, "{e:?}");
}

#[test]
fn model_distance_cases() {
    let g = Grammar::build(GrammarParams::new(3, 2, 2, 2, 1)).unwrap();
    let sched = NoiseSchedule::linear(20).unwrap();
    let oracle = BpOracle::new(g.clone(), KernelKind::Uniform, sched.clone());
    let flat = UniformPredictor { dim: 4, vocab: 3 };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data: Vec<_> = (0..64).map(|_| g.sample_datum(&mut rng)).collect();
    let probes = ProbeSet::from_data(&data, 3, KernelKind::Uniform, &sched, &mut rng).unwrap();
    assert_eq!(model_distance(&oracle, &oracle, &probes).unwrap(), 0.0);
    let d = model_distance(&oracle, &flat, &probes).unwrap();
    let mut direct = 0.0;
    for i in 0..probes.len() {
        let mut p = vec![0.0; 12];
        oracle.predict_x0(&probes.x_t[i * 4..(i + 1) * 4], &probes.t[i..i + 1], &mut p).unwrap();
        for row in p.chunks(3) {
            direct += hellinger(row, &[1.0 / 3.0; 3]).unwrap();
        }
    }
    direct /= (probes.len() * 4) as f64;
    assert!(d > 0.0);
    assert!((d - direct).abs() < 1e-12);
}

#[test]
fn root_rule_covariance_matches_multinomial() {
    // The root node uses exactly one of the v*m root rules, each with
    // probability p = 1/(v m): var = p(1 - p) and cov = -p^2.
    let g = Grammar::build(GrammarParams::new(4, 2, 2, 2, 3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 20_000;
    let a: Vec<_> = (0..n).map(|_| g.sample_datum(&mut rng)).collect();
    let stats = rule_statistics(&g, &a);
    let p = 1.0 / 8.0;
    let se = p * (2.0 * p * (1.0 - p) / n as f64).sqrt();
    let se_var = (p * (1.0 - p) * (1.0 - 2.0 * p).powi(2) / n as f64).sqrt();
    for i in 8..16 {
        for j in 8..16 {
            let (want, tol) = if i == j { (p * (1.0 - p), 3.0 * se_var) } else { (-p * p, 3.0 * se) };
            assert!((stats.cov(i, j) - want).abs() < tol, "{i},{j}: {} vs {want}", stats.cov(i, j));
        }
    }
}
