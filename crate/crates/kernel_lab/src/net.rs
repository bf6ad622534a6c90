//! One-hidden-layer ReLU network `f(x) = c A relu(W x / sqrt(d) + b)` trained
//! to regress the score of a Gaussian cloud at fixed noise.

use memlab_core::metrics::detect_tau_mem;
use memlab_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cloud::{mixture_score_into, GaussianCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Readout multiplier `alpha / sqrt(N)`, learning rate `lr / alpha^2`.
    Lazy,
    /// Readout multiplier `alpha / N`, learning rate `lr N / alpha^2`.
    MeanField,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Exact score of the smoothed cloud at the noisy input.
    Mixture,
    /// Denoising target `-eps / sigma`.
    Denoising,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    pub dim: usize,
    pub width: usize,
    pub scaling: Scaling,
    pub alpha: f64,
    /// `width x dim`
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    /// `dim x width`
    pub a: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Default, Clone)]
pub struct ScoreCache {
    pre: Vec<f64>,
    act: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrads {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe in-bounds views for the asserted lengths.
    unsafe {
        matrixmultiply::dgemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

impl ScoreNet {
    /// Standard Gaussian weights with zero biases. The second half of the
    /// hidden units copies the first with negated readout, so the network
    /// starts at exactly zero output.
    pub fn new(dim: usize, width: usize, scaling: Scaling, alpha: f64, seed: u64) -> Result<Self> {
        if dim == 0 || width < 2 || width % 2 != 0 {
            return Err(Error::InvalidArgument(format!("need d >= 1 and an even width >= 2, got d={dim} N={width}")));
        }
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("output scale {alpha} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = width / 2;
        let mut w = vec![0.0; width * dim];
        for v in &mut w[..half * dim] {
            *v = StandardNormal.sample(&mut rng);
        }
        w.copy_within(..half * dim, half * dim);
        let mut a = vec![0.0; dim * width];
        for r in 0..dim {
            for k in 0..half {
                let g: f64 = StandardNormal.sample(&mut rng);
                a[r * width + k] = g;
                a[r * width + half + k] = -g;
            }
        }
        Ok(Self { dim, width, scaling, alpha, w, b: vec![0.0; width], a })
    }

    pub fn multiplier(&self) -> f64 {
        match self.scaling {
            Scaling::Lazy => self.alpha / (self.width as f64).sqrt(),
            Scaling::MeanField => self.alpha / self.width as f64,
        }
    }

    /// Plain gradient-descent step size for base rate `lr`.
    pub fn step_size(&self, lr: f64) -> f64 {
        let a2 = self.alpha * self.alpha;
        match self.scaling {
            Scaling::Lazy => lr / a2,
            Scaling::MeanField => lr * self.width as f64 / a2,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.w.len() + self.b.len() + self.a.len()
    }

    /// Outputs for `n = x.len() / dim` inputs, row-major.
    pub fn forward(&self, x: &[f64], cache: &mut ScoreCache) -> Vec<f64> {
        let (d, h) = (self.dim, self.width);
        let n = x.len() / d;
        cache.pre.clear();
        cache.pre.extend((0..n).flat_map(|_| self.b.iter().copied()));
        gemm(n, d, h, 1.0 / (d as f64).sqrt(), x, false, &self.w, true, 1.0, &mut cache.pre);
        cache.act.clear();
        cache.act.extend(cache.pre.iter().map(|v| v.max(0.0)));
        let mut out = vec![0.0; n * d];
        gemm(n, h, d, self.multiplier(), &cache.act, false, &self.a, true, 0.0, &mut out);
        out
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x, &mut ScoreCache::default())
    }

    /// Parameter gradients given `dout = dL/df` for the cached batch.
    pub fn backward(&self, x: &[f64], cache: &ScoreCache, dout: &[f64]) -> ScoreGrads {
        let (d, h) = (self.dim, self.width);
        let n = x.len() / d;
        let c = self.multiplier();
        let mut ga = vec![0.0; d * h];
        gemm(d, n, h, c, dout, true, &cache.act, false, 0.0, &mut ga);
        let mut dh = vec![0.0; n * h];
        gemm(n, d, h, c, dout, false, &self.a, false, 0.0, &mut dh);
        for (g, p) in dh.iter_mut().zip(&cache.pre) {
            if *p <= 0.0 {
                *g = 0.0;
            }
        }
        let mut gw = vec![0.0; h * d];
        gemm(h, n, d, 1.0 / (d as f64).sqrt(), &dh, true, x, false, 0.0, &mut gw);
        let mut gb = vec![0.0; h];
        for row in dh.chunks_exact(h) {
            for (g, v) in gb.iter_mut().zip(row) {
                *g += v;
            }
        }
        ScoreGrads { w: gw, b: gb, a: ga }
    }

    pub fn apply(&mut self, g: &ScoreGrads, step: f64) {
        for (p, d) in self.w.iter_mut().zip(&g.w).chain(self.b.iter_mut().zip(&g.b)).chain(self.a.iter_mut().zip(&g.a)) {
            *p -= step * d;
        }
    }
}

/// `mean |f - y|^2 / d` and its gradient with respect to the outputs.
pub fn mse(f: &[f64], y: &[f64], dim: usize, grad: Option<&mut Vec<f64>>) -> f64 {
    let n = (f.len() / dim) as f64;
    let scale = 1.0 / (n * dim as f64);
    if let Some(g) = grad {
        g.clear();
        g.extend(f.iter().zip(y).map(|(a, b)| 2.0 * scale * (a - b)));
    }
    f.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * scale
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrainConfig {
    pub width: usize,
    pub scaling: Scaling,
    pub alpha: f64,
    pub lr: f64,
    /// Minibatch size; 0 or `P` means every point once per step.
    pub batch: usize,
    pub target: Target,
    pub max_steps: u64,
    pub checkpoints_per_decade: usize,
    /// Noise draws per point in the loss evaluations.
    pub eval_draws: usize,
    pub delta: f64,
    pub patience: usize,
    /// Keep training this many checkpoints after the detector fires.
    pub extra_checkpoints: usize,
}

impl Default for ScoreTrainConfig {
    fn default() -> Self {
        Self {
            width: 1024,
            scaling: Scaling::Lazy,
            alpha: 1.0,
            lr: 1.0,
            batch: 0,
            target: Target::Mixture,
            max_steps: 100_000,
            checkpoints_per_decade: 16,
            eval_draws: 8,
            delta: memlab_core::metrics::DEFAULT_DELTA,
            patience: memlab_core::metrics::DEFAULT_PATIENCE,
            extra_checkpoints: 0,
        }
    }
}

/// Loss curves of one run.
///
/// Both losses are denoising losses `sigma^2 / d * E|f(x_j + sigma eps) +
/// eps / sigma|^2`, one over the training cloud and one over fresh points,
/// with the same noise draws. At zero output both equal one. `tau_mem` is the
/// first sustained rise of their ratio, test over train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrace {
    pub steps: Vec<u64>,
    pub train_loss: Vec<f64>,
    pub test_loss: Vec<f64>,
    pub tau_mem: Option<u64>,
}

impl ScoreTrace {
    pub fn ratio(&self) -> Vec<f64> {
        self.test_loss.iter().zip(&self.train_loss).map(|(t, r)| t / r).collect()
    }
}

/// Log-spaced steps from 1 to `max`, with 0 in front and `max` at the end.
pub fn log_schedule(max: u64, per_decade: usize) -> Vec<u64> {
    let mut out = vec![0];
    let mut k = 0;
    loop {
        let t = 10f64.powf(k as f64 / per_decade.max(1) as f64).round() as u64;
        if t >= max {
            break;
        }
        if t > *out.last().unwrap() {
            out.push(t);
        }
        k += 1;
    }
    if max > 0 {
        out.push(max);
    }
    out
}

/// Noisy inputs around every point, `draws` times, with a fixed noise matrix.
struct EvalSet {
    x: Vec<f64>,
    eps: Vec<f64>,
}

impl EvalSet {
    fn new(cloud: &GaussianCloud, eps: &[f64], draws: usize) -> Self {
        let d = cloud.dim();
        let mut x = vec![0.0; draws * cloud.len() * d];
        for r in 0..draws {
            for j in 0..cloud.len() {
                let row = (r * cloud.len() + j) * d;
                cloud.perturb(j, &eps[row..row + d], &mut x[row..row + d]);
            }
        }
        Self { x, eps: eps[..draws * cloud.len() * d].to_vec() }
    }

    fn loss(&self, net: &ScoreNet, sigma: f64) -> f64 {
        let d = net.dim;
        let mut total = 0.0;
        let mut cache = ScoreCache::default();
        let rows = 4096 * d;
        for (x, e) in self.x.chunks(rows).zip(self.eps.chunks(rows)) {
            let f = net.forward(x, &mut cache);
            total += f.iter().zip(e).map(|(f, e)| (sigma * f + e).powi(2)).sum::<f64>();
        }
        total / self.x.len() as f64
    }
}

/// Trains on `cloud` and evaluates against `test`, a cloud of fresh points
/// with the same noise level. Stops at `max_steps` or once the memorization
/// detector has fired and `extra_checkpoints` more were recorded.
pub fn train_score_net(
    cloud: &GaussianCloud,
    test: &GaussianCloud,
    cfg: &ScoreTrainConfig,
    seed: u64,
) -> Result<(ScoreNet, ScoreTrace)> {
    let (p, d) = (cloud.len(), cloud.dim());
    if test.dim() != d || test.sigma != cloud.sigma {
        return Err(Error::InvalidArgument("test cloud must share dimension and noise level".into()));
    }
    let batch = if cfg.batch == 0 { p } else { cfg.batch };
    if batch > p {
        return Err(Error::InvalidArgument(format!("batch {batch} exceeds {p} points")));
    }
    if cfg.eval_draws == 0 {
        return Err(Error::InvalidArgument("need at least one evaluation draw".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = ScoreNet::new(d, cfg.width, cfg.scaling, cfg.alpha, rng.random())?;
    let rows = cfg.eval_draws * p.max(test.len()) * d;
    let eps: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(&mut rng)).collect();
    let (train_eval, test_eval) = (EvalSet::new(cloud, &eps, cfg.eval_draws), EvalSet::new(test, &eps, cfg.eval_draws));
    let schedule = log_schedule(cfg.max_steps, cfg.checkpoints_per_decade);
    let eta = net.step_size(cfg.lr);
    let sigma = cloud.sigma;

    let mut trace = ScoreTrace { steps: Vec::new(), train_loss: Vec::new(), test_loss: Vec::new(), tau_mem: None };
    let mut after = 0;
    let (mut x, mut y, mut e) = (vec![0.0; batch * d], vec![0.0; batch * d], vec![0.0; d]);
    let mut grad = Vec::new();
    let mut cache = ScoreCache::default();
    let mut step = 0u64;
    for &target_step in &schedule {
        while step < target_step {
            for i in 0..batch {
                let j = if batch == p { i } else { rng.random_range(0..p) };
                e.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
                let row = i * d;
                cloud.perturb(j, &e, &mut x[row..row + d]);
                match cfg.target {
                    Target::Mixture => mixture_score_into(&x[row..row + d], cloud, &mut y[row..row + d]),
                    Target::Denoising => {
                        for (t, v) in y[row..row + d].iter_mut().zip(&e) {
                            *t = -v / sigma;
                        }
                    }
                }
            }
            let f = net.forward(&x, &mut cache);
            let loss = mse(&f, &y, d, Some(&mut grad));
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Diverged { tau: step, loss });
            }
            let g = net.backward(&x, &cache, &grad);
            net.apply(&g, eta);
        }
        let (tr, te) = (train_eval.loss(&net, sigma), test_eval.loss(&net, sigma));
        if !tr.is_finite() || !te.is_finite() {
            return Err(Error::Diverged { tau: step, loss: tr });
        }
        trace.steps.push(step);
        trace.train_loss.push(tr);
        trace.test_loss.push(te);
        if trace.tau_mem.is_none() {
            trace.tau_mem = detect_tau_mem(&trace.steps, &trace.ratio(), cfg.delta, cfg.patience);
        } else {
            after += 1;
        }
        if trace.tau_mem.is_some() && after >= cfg.extra_checkpoints {
            break;
        }
    }
    Ok((net, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_init_outputs_zero() {
        let net = ScoreNet::new(5, 16, Scaling::Lazy, 2.0, 1).unwrap();
        let x: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        assert!(net.predict(&x).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn schedule_is_increasing() {
        let s = log_schedule(1000, 4);
        assert_eq!(s[..3], [0, 1, 2]);
        assert_eq!(*s.last().unwrap(), 1000);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_rate_gives_a_flat_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = GaussianCloud::sample(8, 4, 0.1, &mut rng).unwrap();
        let t = GaussianCloud::sample(8, 4, 0.1, &mut rng).unwrap();
        let cfg = ScoreTrainConfig { width: 16, lr: 0.0, max_steps: 100, ..Default::default() };
        let (_, trace) = train_score_net(&c, &t, &cfg, 4).unwrap();
        assert!(trace.train_loss.windows(2).all(|w| w[0] == w[1]));
        assert!(trace.test_loss.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(trace.tau_mem, None);
        assert_eq!(*trace.steps.last().unwrap(), 100);
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = GaussianCloud::sample(4, 2, 0.1, &mut rng).unwrap();
        let cfg = ScoreTrainConfig { width: 4, batch: 5, ..Default::default() };
        assert!(train_score_net(&c, &c, &cfg, 0).is_err());
    }
}
