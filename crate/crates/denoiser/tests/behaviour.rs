use memlab_core::metrics::{error_fraction_per_layer, ErrorMode};
use memlab_core::noise::{KernelKind, NoiseSchedule};
use memlab_core::{BpOracle, Grammar, GrammarParams, UniformPredictor};
use memlab_denoiser::train::{evaluate, forward_kernels, NoisyBatch};
use memlab_denoiser::{generate, AdamConfig, InitScheme, LossConfig, Network, NetworkConfig, TrainConfig, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(g: &Grammar, kind: KernelKind, sched: &NoiseSchedule, n: usize, seed: u64) -> NoisyBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernels = forward_kernels(kind, g.vocab(), sched).unwrap();
    let items: Vec<_> = (0..n).map(|_| g.sample_datum(&mut rng)).collect();
    NoisyBatch::sample(items.iter(), &kernels, &mut rng)
}

#[test]
fn mup_activation_scale_is_width_independent() {
    let p = GrammarParams::new(8, 2, 3, 2, 0);
    let g = Grammar::build(p).unwrap();
    let sched = NoiseSchedule::linear(1000).unwrap();
    let batch = random_batch(&g, KernelKind::Uniform, &sched, 64, 1);
    let rms = |c: usize| {
        let net = Network::new(NetworkConfig::tree_unet(&p, KernelKind::Uniform, 1000, c), 2).unwrap();
        net.activation_rms(&batch.x_t, &batch.t).unwrap()
    };
    let (a, b) = (rms(64), rms(128));
    for (i, (x, y)) in a.iter().zip(&b).enumerate().take(a.len() - 1) {
        let r = x / y;
        assert!((0.5..2.0).contains(&r), "block {i}: {x} vs {y}");
    }
    // Readout shrinks with width under the 1/fan_in multiplier.
    let hidden = a[..a.len() - 1].iter().sum::<f64>() / (a.len() - 1) as f64;
    assert!(a[a.len() - 1] < 0.1 * hidden, "logit rms {} hidden {hidden}", a[a.len() - 1]);
}

#[test]
fn fixed_batch_descent_at_small_rate() {
    let p = GrammarParams::new(4, 2, 2, 2, 3);
    let g = Grammar::build(p).unwrap();
    let sched = NoiseSchedule::linear(50).unwrap();
    for kind in [KernelKind::Uniform, KernelKind::Absorbing] {
        for mlp in [false, true] {
            let mut cfg = NetworkConfig::tree_unet(&p, kind, 50, 8);
            if mlp {
                cfg = NetworkConfig::mlp(&p, kind, 50, 8);
            }
            let net = Network::new(cfg, 4).unwrap();
            let tc = TrainConfig { adam: AdamConfig { lr: 1e-3, ..Default::default() }, batch: 16, loss: LossConfig::default() };
            let mut st = TrainState::new(net, kind, sched.clone(), tc, 5).unwrap();
            let batch = random_batch(&g, kind, &sched, 16, 6);
            let mut last = st.evaluate(&batch).unwrap().total;
            for _ in 0..10 {
                st.step_on(&batch).unwrap();
                let now = st.evaluate(&batch).unwrap().total;
                assert!(now <= last + 1e-12, "{kind:?} mlp={mlp}: {now} > {last}");
                last = now;
            }
        }
    }
}

#[test]
fn exact_denoiser_generates_valid_strings() {
    let p = GrammarParams::new(8, 2, 3, 2, 7);
    let g = Grammar::build(p).unwrap();
    let sched = NoiseSchedule::linear(1000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for kind in [KernelKind::Uniform, KernelKind::Absorbing] {
        let oracle = BpOracle::new(g.clone(), kind, sched.clone());
        let samples = generate(&oracle, kind, &sched, 1000, 1000, &mut rng).unwrap();
        let errs = error_fraction_per_layer(&g, &samples, ErrorMode::Strict);
        assert!(errs.iter().all(|&e| e < 0.01), "{kind:?}: {errs:?}");
    }
}

#[test]
fn untrained_network_generates_random_strings() {
    let p = GrammarParams::new(4, 2, 2, 2, 9);
    let g = Grammar::build(p).unwrap();
    let sched = NoiseSchedule::linear(200).unwrap();
    let net = Network::new(NetworkConfig::tree_unet(&p, KernelKind::Uniform, 200, 64), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 4000;
    let samples = generate(&net, KernelKind::Uniform, &sched, n, 50, &mut rng).unwrap();
    let valid = 1.0 - error_fraction_per_layer(&g, &samples, ErrorMode::Strict)[0];
    // Each of the d/s blocks is one of m*v allowed tuples out of v^s.
    let expected = (8.0f64 / 16.0).powi(2);
    let sd = (expected * (1.0 - expected) / n as f64).sqrt();
    assert!((valid - expected).abs() < 3.0 * sd + 0.01, "{valid} vs {expected}");
}

#[test]
fn exact_marginals_minimize_the_loss() {
    let p = GrammarParams::new(4, 2, 2, 2, 12);
    let g = Grammar::build(p).unwrap();
    let sched = NoiseSchedule::linear(100).unwrap();
    let kind = KernelKind::Uniform;
    let data = g.sample_dataset(24, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    let net = Network::new(NetworkConfig::tree_unet(&p, kind, 100, 32), 14).unwrap();
    let tc = TrainConfig { adam: AdamConfig { lr: 0.01, ..Default::default() }, batch: 32, loss: LossConfig::default() };
    let mut st = TrainState::new(net, kind, sched.clone(), tc, 15).unwrap();
    for _ in 0..300 {
        st.train_step(data.items()).unwrap();
    }
    let oracle = BpOracle::new(g.clone(), kind, sched.clone());
    let uniform = UniformPredictor { dim: 4, vocab: 4 };
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (mut diff_net, mut diff_uni) = (Vec::new(), Vec::new());
    for _ in 0..1000 {
        let batch = random_batch(&g, kind, &sched, 32, rng.random());
        let o = evaluate(&oracle, kind, &sched, &cfg, &batch).unwrap().total;
        diff_net.push(evaluate(&st.net, kind, &sched, &cfg, &batch).unwrap().total - o);
        diff_uni.push(evaluate(&uniform, kind, &sched, &cfg, &batch).unwrap().total - o);
    }
    for diffs in [diff_net, diff_uni] {
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean > -2.0 * (var / n).sqrt(), "mean gap {mean}");
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let p = GrammarParams::new(4, 2, 2, 2, 17);
    let g = Grammar::build(p).unwrap();
    let data = g.sample_dataset(16, &mut ChaCha8Rng::seed_from_u64(18)).unwrap();
    let run = || {
        let sched = NoiseSchedule::linear(100).unwrap();
        let mut cfg = NetworkConfig::tree_unet(&p, KernelKind::Absorbing, 100, 16);
        cfg.init = InitScheme::Mup;
        let net = Network::new(cfg, 19).unwrap();
        let mut st = TrainState::new(net, KernelKind::Absorbing, sched, TrainConfig::default(), 20).unwrap();
        let losses: Vec<u64> = (0..50).map(|_| st.train_step(data.items()).unwrap().total.to_bits()).collect();
        (losses, st.net.params.iter().flat_map(|p| p.value.iter().map(|x| x.to_bits())).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
