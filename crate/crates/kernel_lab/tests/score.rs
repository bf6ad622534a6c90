use memlab_kernel_lab::net::{mse, ScoreCache};
use memlab_kernel_lab::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|k| {
            xp[k] = x[k] + h;
            let up = f(&xp);
            xp[k] = x[k] - h;
            let down = f(&xp);
            xp[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = a.iter().chain(b).map(|x| x * x).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn score_matches_log_density_gradient(seed in 0u64..1000, p in 1usize..12, sigma in 0.3f64..2.0, j in 0usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = GaussianCloud::sample(p, 5, sigma, &mut rng).unwrap();
        let mut x = vec![0.0; 5];
        let eps: Vec<f64> = (0..5).map(|k| 0.7 - 0.3 * k as f64).collect();
        cloud.perturb(j % p, &eps, &mut x);
        let fd = central_diff(|y| cloud.log_density(y), &x, 1e-5 * sigma);
        let s = mixture_score(&x, &cloud);
        prop_assert!(rel_err(&s, &fd) < 1e-5, "{:?} vs {:?}", s, fd);
    }

    #[test]
    fn symmetric_init_is_silent(seed in 0u64..1000, half in 1usize..16) {
        for scaling in [Scaling::Lazy, Scaling::MeanField] {
            let net = ScoreNet::new(3, 2 * half, scaling, 2.0, seed).unwrap();
            let out = net.predict(&[0.4, -1.0, 2.5, 0.1, 0.0, -0.3]);
            prop_assert!(out.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn powerlaw_fit_recovers_exponent(slope in -3.0f64..3.0, c in 0.1f64..10.0) {
        let xs = [1.0, 2.0, 5.0, 11.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| c * x.powf(slope)).collect();
        let fit = fit_powerlaw(&xs, &ys).unwrap();
        prop_assert!((fit.slope - slope).abs() < 1e-10);
        prop_assert!((fit.intercept - c.ln()).abs() < 1e-10);
    }
}

/// Parameter gradients of `mse(f(x), y)` at width 4 against central
/// differences, away from the symmetric init so every path is active.
#[test]
fn width_four_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = GaussianCloud::sample(5, 3, 1.0, &mut rng).unwrap().points().to_vec();
    let y = GaussianCloud::sample(5, 3, 1.0, &mut rng).unwrap().points().to_vec();
    for scaling in [Scaling::Lazy, Scaling::MeanField] {
        let mut net = ScoreNet::new(3, 4, scaling, 1.5, 9).unwrap();
        for (i, v) in net.a.iter_mut().enumerate() {
            *v += 0.1 * i as f64;
        }
        for (i, v) in net.b.iter_mut().enumerate() {
            *v = 0.2 - 0.1 * i as f64;
        }
        let mut cache = ScoreCache::default();
        let f = net.forward(&x, &mut cache);
        let mut dout = Vec::new();
        mse(&f, &y, 3, Some(&mut dout));
        let g = net.backward(&x, &cache, &dout);
        let analytic: Vec<f64> = g.w.iter().chain(&g.b).chain(&g.a).copied().collect();

        let params: Vec<f64> = net.w.iter().chain(&net.b).chain(&net.a).copied().collect();
        let (nw, nb) = (net.w.len(), net.b.len());
        let loss = |p: &[f64]| {
            let mut n = net.clone();
            n.w.copy_from_slice(&p[..nw]);
            n.b.copy_from_slice(&p[nw..nw + nb]);
            n.a.copy_from_slice(&p[nw + nb..]);
            mse(&n.predict(&x), &y, 3, None)
        };
        let numeric = central_diff(loss, &params, 1e-6);
        let err = rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "{scaling:?}: relative error {err}");
    }
}

#[test]
fn apply_descends() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = GaussianCloud::sample(8, 4, 1.0, &mut rng).unwrap().points().to_vec();
    let y = GaussianCloud::sample(8, 4, 1.0, &mut rng).unwrap().points().to_vec();
    let mut net = ScoreNet::new(4, 16, Scaling::Lazy, 1.0, 2).unwrap();
    let mut cache = ScoreCache::default();
    let mut dout = Vec::new();
    let before = mse(&net.forward(&x, &mut cache), &y, 4, Some(&mut dout));
    let g = net.backward(&x, &cache, &dout);
    net.apply(&g, 1e-3);
    assert!(mse(&net.predict(&x), &y, 4, None) < before);
}

#[test]
fn memorization_is_detected_on_a_small_cloud() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let train = GaussianCloud::sample(8, 32, 0.18, &mut rng).unwrap();
    let test = GaussianCloud::sample(64, 32, 0.18, &mut rng).unwrap();
    let cfg = ScoreTrainConfig { width: 256, alpha: 4.0, lr: 2.0, max_steps: 20_000, ..Default::default() };
    let (_, trace) = train_score_net(&train, &test, &cfg, 1).unwrap();
    let tau = trace.tau_mem.expect("no memorization within the step cap");
    let last = trace.steps.len() - 1;
    assert_eq!(*trace.steps.last().unwrap() >= tau, true);
    assert!(trace.train_loss[last] < trace.train_loss[0]);
    assert!(trace.ratio()[last] > 1.05);
}

#[test]
fn training_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let train = GaussianCloud::sample(6, 4, 0.2, &mut rng).unwrap();
    let test = GaussianCloud::sample(10, 4, 0.2, &mut rng).unwrap();
    let cfg = ScoreTrainConfig { width: 16, batch: 3, max_steps: 200, ..Default::default() };
    let (a, ta) = train_score_net(&train, &test, &cfg, 4).unwrap();
    let (b, tb) = train_score_net(&train, &test, &cfg, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
}
