//! Training state, noisy batches and the Adam training step.

use memlab_core::grammar::{Symbol, TokenSequence};
use memlab_core::noise::{cumulative_kernel, KernelKind, NoiseSchedule, TransitionKernel};
use memlab_core::{Error, Result, X0Predictor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::loss::{batch_loss, LossConfig, LossValue};
use crate::net::{Cache, Network};
use crate::ops::softmax_rows;
use crate::param::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { adam: AdamConfig::default(), batch: 32, loss: LossConfig::default() }
    }
}

/// Clean tokens, their noisy versions and the noise level of each sequence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoisyBatch {
    pub x0: Vec<Symbol>,
    pub x_t: Vec<Symbol>,
    pub t: Vec<usize>,
}

impl NoisyBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Corrupts each sequence at a level drawn uniformly from `1..=T`.
    pub fn sample<'a, R: Rng + ?Sized>(
        items: impl IntoIterator<Item = &'a TokenSequence>,
        kernels: &[TransitionKernel],
        rng: &mut R,
    ) -> Self {
        let mut batch = Self::default();
        for x in items {
            let t = rng.random_range(1..=kernels.len());
            let k = &kernels[t - 1];
            batch.x0.extend_from_slice(x.tokens());
            batch.x_t.extend(x.tokens().iter().map(|&s| k.sample(s, rng)));
            batch.t.push(t);
        }
        batch
    }
}

/// Cumulative kernels for `t = 1..=T`.
pub fn forward_kernels(kind: KernelKind, vocab: usize, schedule: &NoiseSchedule) -> Result<Vec<TransitionKernel>> {
    (1..=schedule.len()).map(|t| cumulative_kernel(kind, vocab, schedule, t)).collect()
}

/// Network, optimizer, step counter and the stream driving batch draws.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: Network,
    pub opt: Adam,
    pub tau: u64,
    pub config: TrainConfig,
    pub kind: KernelKind,
    pub schedule: NoiseSchedule,
    kernels: Vec<TransitionKernel>,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(net: Network, kind: KernelKind, schedule: NoiseSchedule, config: TrainConfig, seed: u64) -> Result<Self> {
        if config.batch == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let kernels = forward_kernels(kind, net.config.vocab, &schedule)?;
        let opt = Adam::new(config.adam, &net.params);
        Ok(Self { net, opt, tau: 0, config, kind, schedule, kernels, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn kernels(&self) -> &[TransitionKernel] {
        &self.kernels
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    /// Draws a batch (with replacement) from `data` and takes one step.
    pub fn train_step(&mut self, data: &[TokenSequence]) -> Result<LossValue> {
        if data.is_empty() {
            return Err(Error::EmptyReference);
        }
        let picks: Vec<usize> = (0..self.config.batch).map(|_| self.rng.random_range(0..data.len())).collect();
        let batch = NoisyBatch::sample(picks.iter().map(|&i| &data[i]), &self.kernels, &mut self.rng);
        self.step_on(&batch)
    }

    /// One Adam update on a fixed batch.
    pub fn step_on(&mut self, batch: &NoisyBatch) -> Result<LossValue> {
        let mut cache = Cache::default();
        let mut phat = self.net.forward(&batch.x_t, &batch.t, &mut cache)?;
        softmax_rows(&mut phat, self.net.config.vocab);
        let mut dlogits = vec![0.0; phat.len()];
        let value = batch_loss(self.kind, &self.schedule, &self.config.loss, &batch.x0, &batch.x_t, &batch.t, &phat, &mut dlogits)?;
        if !value.total.is_finite() {
            return Err(Error::Diverged { tau: self.tau, loss: value.total });
        }
        self.net.zero_grad();
        self.net.backward(&cache, &dlogits);
        self.opt.step(&mut self.net.params);
        self.tau += 1;
        if self.net.params.iter().any(|p| p.value.iter().any(|w| !w.is_finite())) {
            return Err(Error::Diverged { tau: self.tau, loss: f64::NAN });
        }
        Ok(value)
    }

    /// Loss of the current network on a batch, without updating anything.
    pub fn evaluate(&self, batch: &NoisyBatch) -> Result<LossValue> {
        evaluate(&self.net, self.kind, &self.schedule, &self.config.loss, batch)
    }
}

const EVAL_CHUNK: usize = 512;

/// Token-averaged loss of any x0 predictor over a (possibly large) batch.
pub fn evaluate(
    predictor: &dyn X0Predictor,
    kind: KernelKind,
    schedule: &NoiseSchedule,
    loss: &LossConfig,
    batch: &NoisyBatch,
) -> Result<LossValue> {
    let (d, v) = (predictor.dim(), predictor.vocab());
    let mut acc = LossValue::default();
    let n = batch.len();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let (x0, x_t, t) = (&batch.x0[start * d..end * d], &batch.x_t[start * d..end * d], &batch.t[start..end]);
        let mut phat = vec![0.0; x_t.len() * v];
        predictor.predict_x0(x_t, t, &mut phat)?;
        let mut scratch = vec![0.0; phat.len()];
        let part = batch_loss(kind, schedule, loss, x0, x_t, t, &phat, &mut scratch)?;
        let w = (end - start) as f64 / n as f64;
        acc.total += w * part.total;
        acc.bound += w * part.bound;
        acc.cross_entropy += w * part.cross_entropy;
    }
    Ok(acc)
}
