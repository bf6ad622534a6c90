//! Discrete forward processes: uniform and absorbing (masked) transition
//! kernels, their noise schedules, and single-step posteriors.
//!
//! Kernels are carried as the pair `(kind, keep)` where `keep` is `1 - beta`
//! for a single step or the cumulative product `alpha_bar_t` for a cumulative
//! kernel. Dense matrices are only materialized on request.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{Symbol, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// Resample uniformly over the vocabulary.
    Uniform,
    /// Jump to an extra absorbing mask state with index `v`.
    Absorbing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Terminal cumulative keep-probability targeted by [`NoiseSchedule::linear`].
pub const TERMINAL_ALPHA_BAR: f64 = 1e-5;
pub const DEFAULT_BETA_START: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// `betas[t - 1]` for `t` in `1..=T`.
    pub betas: Vec<f64>,
    #[serde(skip)]
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit per-step rates.
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if let Some(&b) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::InvalidBeta(b));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { kind, betas, alpha_bars })
    }

    /// Linear rates from `DEFAULT_BETA_START` up to the end value at which the
    /// terminal `alpha_bar_T` equals [`TERMINAL_ALPHA_BAR`].
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        let target = TERMINAL_ALPHA_BAR.ln();
        let log_keep = |end: f64| -> f64 {
            linear_betas(steps, DEFAULT_BETA_START, end)
                .iter()
                .map(|b| (-b).ln_1p())
                .sum()
        };
        if log_keep(1.0) > target {
            // Even ending at full mixing cannot reach the target: the last step is a full reset.
            return Self::linear_with(steps, DEFAULT_BETA_START.min(1.0), 1.0);
        }
        let (mut lo, mut hi) = (DEFAULT_BETA_START, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if log_keep(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Self::linear_with(steps, DEFAULT_BETA_START, hi)
    }

    pub fn linear_with(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::from_betas(ScheduleKind::Linear, linear_betas(steps, beta_start, beta_end))
    }

    /// Cosine schedule on `alpha_bar` with offset 0.008; rates clipped to `[0, 1]`.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        let offset = 0.008;
        let f = |t: f64| ((t / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let f0 = f(0.0);
        let betas = (1..=steps)
            .map(|t| {
                let prev = f((t - 1) as f64) / f0;
                let cur = f(t as f64) / f0;
                (1.0 - cur / prev).clamp(0.0, 1.0)
            })
            .collect();
        Self::from_betas(ScheduleKind::Cosine, betas)
    }

    pub fn build(kind: ScheduleKind, steps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Linear => Self::linear(steps),
            ScheduleKind::Cosine => Self::cosine(steps),
        }
    }

    /// Recomputes cached products after deserialization.
    pub fn refresh(&mut self) -> Result<()> {
        *self = Self::from_betas(self.kind, std::mem::take(&mut self.betas))?;
        Ok(())
    }

    /// Number of noise levels `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t, 1)?;
        Ok(self.betas[t - 1])
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_t(t, 0)?;
        Ok(self.alpha_bars[t - 1])
    }

    fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min.max(1) || t > self.len() {
            return Err(Error::TimeOutOfRange { t, min: min.max(1), max: self.len() });
        }
        Ok(())
    }
}

fn linear_betas(steps: usize, start: f64, end: f64) -> Vec<f64> {
    if steps == 1 {
        return vec![end];
    }
    (0..steps)
        .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
        .collect()
}

/// `keep * I + (1 - keep) * 1 pi^T` with `pi` uniform (uniform kind) or the
/// mask indicator (absorbing kind).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionKernel {
    pub kind: KernelKind,
    /// Number of data symbols `v`; absorbing kernels act on `v + 1` states.
    pub vocab: usize,
    pub keep: f64,
}

impl TransitionKernel {
    pub fn new(kind: KernelKind, vocab: usize, keep: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&keep) {
            return Err(Error::InvalidBeta(1.0 - keep));
        }
        if vocab == 0 {
            return Err(Error::InvalidArgument("vocabulary must be nonempty".into()));
        }
        Ok(Self { kind, vocab, keep })
    }

    pub fn num_states(&self) -> usize {
        match self.kind {
            KernelKind::Uniform => self.vocab,
            KernelKind::Absorbing => self.vocab + 1,
        }
    }

    /// Index of the absorbing state, if any.
    pub fn mask(&self) -> Option<Symbol> {
        match self.kind {
            KernelKind::Uniform => None,
            KernelKind::Absorbing => Some(self.vocab as Symbol),
        }
    }

    /// `Q[from, to]`.
    pub fn prob(&self, from: Symbol, to: Symbol) -> f64 {
        let stay = if from == to { self.keep } else { 0.0 };
        match self.kind {
            KernelKind::Uniform => stay + (1.0 - self.keep) / self.vocab as f64,
            KernelKind::Absorbing => {
                if from as usize == self.vocab {
                    // The mask row is absorbing.
                    (to as usize == self.vocab) as u8 as f64
                } else if to as usize == self.vocab {
                    1.0 - self.keep
                } else {
                    stay
                }
            }
        }
    }

    pub fn row(&self, from: Symbol) -> Vec<f64> {
        (0..self.num_states() as Symbol).map(|to| self.prob(from, to)).collect()
    }

    /// Dense row-major matrix.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.num_states() as Symbol).map(|i| self.row(i)).collect()
    }

    /// Draws `x' ~ Q[x, .]`.
    pub fn sample<R: Rng + ?Sized>(&self, x: Symbol, rng: &mut R) -> Symbol {
        if rng.random::<f64>() < self.keep {
            return x;
        }
        match self.kind {
            KernelKind::Uniform => rng.random_range(0..self.vocab) as Symbol,
            KernelKind::Absorbing => self.vocab as Symbol,
        }
    }
}

/// `Q_t = (1 - beta_t) I + beta_t 1 pi^T`.
pub fn step_kernel(kind: KernelKind, vocab: usize, beta: f64) -> Result<TransitionKernel> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidBeta(beta));
    }
    TransitionKernel::new(kind, vocab, 1.0 - beta)
}

/// `Q_bar_t = Q_1 Q_2 ... Q_t`, in closed form.
pub fn cumulative_kernel(
    kind: KernelKind,
    vocab: usize,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<TransitionKernel> {
    schedule.check_t(t, 1)?;
    TransitionKernel::new(kind, vocab, schedule.alpha_bar(t)?)
}

/// Resamples every token independently from its kernel row.
pub fn apply_forward<R: Rng + ?Sized>(x0: &TokenSequence, kernel: &TransitionKernel, rng: &mut R) -> TokenSequence {
    TokenSequence::new(x0.tokens().iter().map(|&x| kernel.sample(x, rng)).collect())
}

/// `q(x_s | x_t, x_0)` for `s < t`, given the keep-probabilities
/// `alpha_bar_s` and `alpha_bar_t`. The jump kernel from `s` to `t` keeps with
/// probability `alpha_bar_t / alpha_bar_s`.
pub fn jump_posterior(
    kind: KernelKind,
    vocab: usize,
    x_t: Symbol,
    x0: Symbol,
    alpha_bar_s: f64,
    alpha_bar_t: f64,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; num_states(kind, vocab)];
    jump_posterior_into(kind, vocab, x_t, x0, alpha_bar_s, alpha_bar_t, &mut out)?;
    Ok(out)
}

/// Allocation-free [`jump_posterior`].
pub fn jump_posterior_into(
    kind: KernelKind,
    vocab: usize,
    x_t: Symbol,
    x0: Symbol,
    alpha_bar_s: f64,
    alpha_bar_t: f64,
    out: &mut [f64],
) -> Result<()> {
    let jump_keep = if alpha_bar_s > 0.0 { (alpha_bar_t / alpha_bar_s).min(1.0) } else { 1.0 };
    let forward = TransitionKernel { kind, vocab, keep: jump_keep };
    let prior = TransitionKernel { kind, vocab, keep: alpha_bar_s };
    let mut total = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        let j = j as Symbol;
        *o = forward.prob(j, x_t) * prior.prob(x0, j);
        total += *o;
    }
    if !(total > 0.0) {
        return Err(Error::ImpossibleTransition);
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(())
}

fn num_states(kind: KernelKind, vocab: usize) -> usize {
    match kind {
        KernelKind::Uniform => vocab,
        KernelKind::Absorbing => vocab + 1,
    }
}

/// `q(x_{t-1} | x_t, x_0)` for `2 <= t <= T`.
pub fn step_posterior(
    kind: KernelKind,
    vocab: usize,
    x_t: Symbol,
    x0: Symbol,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<Vec<f64>> {
    if t < 2 || t > schedule.len() {
        return Err(Error::TimeOutOfRange { t, min: 2, max: schedule.len() });
    }
    let beta = schedule.beta(t)?;
    let prev = schedule.alpha_bar(t - 1)?;
    // Use the single-step rate directly rather than the ratio of products, so
    // that beta_t = 0 gives an exact point mass even when alpha_bar underflows.
    let forward = TransitionKernel { kind, vocab, keep: 1.0 - beta };
    let prior = TransitionKernel { kind, vocab, keep: prev };
    let mut out: Vec<f64> = (0..num_states(kind, vocab) as Symbol)
        .map(|j| forward.prob(j, x_t) * prior.prob(x0, j))
        .collect();
    let total: f64 = out.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ImpossibleTransition);
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        (0..n)
            .map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect())
            .collect()
    }

    #[test]
    fn uniform_step_kernel_extremes() {
        let id = step_kernel(KernelKind::Uniform, 4, 0.0).unwrap().to_dense();
        for (i, row) in id.iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                assert_eq!(p, (i == j) as u8 as f64);
            }
        }
        let full = step_kernel(KernelKind::Uniform, 4, 1.0).unwrap().to_dense();
        assert!(full.iter().flatten().all(|&p| p == 0.25));
    }

    #[test]
    fn absorbing_step_kernel() {
        let q = step_kernel(KernelKind::Absorbing, 4, 0.5).unwrap().to_dense();
        assert_eq!(q.len(), 5);
        assert_eq!(q[2], vec![0.0, 0.0, 0.5, 0.0, 0.5]);
        assert_eq!(q[4], vec![0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn beta_out_of_range() {
        assert!(matches!(step_kernel(KernelKind::Uniform, 4, 1.5), Err(Error::InvalidBeta(_))));
        assert!(step_kernel(KernelKind::Uniform, 4, -0.1).is_err());
    }

    #[test]
    fn cumulative_matches_two_step_product() {
        let sched = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.1, 0.2]).unwrap();
        let q1 = step_kernel(KernelKind::Uniform, 3, 0.1).unwrap().to_dense();
        let q2 = step_kernel(KernelKind::Uniform, 3, 0.2).unwrap().to_dense();
        let prod = matmul(&q1, &q2);
        let cum = cumulative_kernel(KernelKind::Uniform, 3, &sched, 2).unwrap();
        assert!((cum.keep - 0.72).abs() < 1e-15);
        for (r1, r2) in prod.iter().zip(cum.to_dense()) {
            for (a, b) in r1.iter().zip(r2) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(
            cumulative_kernel(KernelKind::Uniform, 3, &sched, 1).unwrap(),
            step_kernel(KernelKind::Uniform, 3, 0.1).unwrap()
        );
        assert!(cumulative_kernel(KernelKind::Uniform, 3, &sched, 3).is_err());
        assert!(cumulative_kernel(KernelKind::Uniform, 3, &sched, 0).is_err());
    }

    #[test]
    fn default_linear_schedule_reaches_stationarity() {
        let sched = NoiseSchedule::linear(1000).unwrap();
        assert_eq!(sched.len(), 1000);
        assert!(sched.alpha_bar(1000).unwrap() < 1e-4);
        assert!((sched.beta(1).unwrap() - 1e-4).abs() < 1e-15);
        let cum = cumulative_kernel(KernelKind::Uniform, 5, &sched, 1000).unwrap();
        for row in cum.to_dense() {
            for p in row {
                assert!((p - 0.2).abs() < 1e-4);
            }
        }
        let short = NoiseSchedule::linear(20).unwrap();
        assert!(short.alpha_bar(20).unwrap() <= 1e-4);
    }

    #[test]
    fn cosine_schedule_is_valid() {
        let sched = NoiseSchedule::cosine(100).unwrap();
        assert!(sched.betas.iter().all(|b| (0.0..=1.0).contains(b)));
        assert!(sched.alpha_bar(100).unwrap() < 1e-4);
    }

    #[test]
    fn forward_identity_and_full_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = TokenSequence::new(vec![0, 3, 1, 2]);
        let id = TransitionKernel::new(KernelKind::Uniform, 4, 1.0).unwrap();
        assert_eq!(apply_forward(&x, &id, &mut rng), x);
        let masked = TransitionKernel::new(KernelKind::Absorbing, 4, 0.0).unwrap();
        assert!(apply_forward(&x, &masked, &mut rng).tokens().iter().all(|&t| t == 4));
    }

    #[test]
    fn posterior_edge_cases() {
        let sched = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.3, 0.0, 0.5]).unwrap();
        // beta_t = 0: point mass at x_t.
        let p = step_posterior(KernelKind::Uniform, 3, 2, 0, &sched, 2).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 1.0]);
        // alpha_bar_{t-1} = 1: point mass at x_0.
        let clean = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.0, 0.4]).unwrap();
        let p = step_posterior(KernelKind::Uniform, 3, 2, 1, &clean, 2).unwrap();
        assert_eq!(p, vec![0.0, 1.0, 0.0]);
        assert!(step_posterior(KernelKind::Uniform, 3, 2, 1, &clean, 1).is_err());
    }

    #[test]
    fn two_state_posterior_hand_value() {
        // beta_t = 0.5, alpha_bar_{t-1} = 0.5, x_t = x_0 = 0: both factors are
        // (0.75, 0.25), so the posterior is (0.9, 0.1).
        let sched = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.5, 0.5]).unwrap();
        let p = step_posterior(KernelKind::Uniform, 2, 0, 0, &sched, 2).unwrap();
        let q_t = step_kernel(KernelKind::Uniform, 2, 0.5).unwrap().to_dense();
        let q_prev = cumulative_kernel(KernelKind::Uniform, 2, &sched, 1).unwrap().to_dense();
        let joint: Vec<f64> = (0..2).map(|j| q_t[j][0] * q_prev[0][j]).collect();
        let z: f64 = joint.iter().sum();
        for j in 0..2 {
            assert!((p[j] - joint[j] / z).abs() < 1e-15);
        }
        assert!((p[0] - 0.9).abs() < 1e-15);
        assert!((p[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn absorbing_posterior_rejects_impossible_pair() {
        let sched = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.2, 0.2]).unwrap();
        // x_t = 1 unmasked but x_0 = 0: impossible.
        assert!(matches!(
            step_posterior(KernelKind::Absorbing, 3, 1, 0, &sched, 2),
            Err(Error::ImpossibleTransition)
        ));
        let p = step_posterior(KernelKind::Absorbing, 3, 3, 0, &sched, 2).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[1], 0.0);
    }

    #[test]
    fn jump_posterior_matches_step_posterior() {
        let sched = NoiseSchedule::linear(50).unwrap();
        for t in 2..=50 {
            let a = step_posterior(KernelKind::Uniform, 5, 3, 1, &sched, t).unwrap();
            let b = jump_posterior(
                KernelKind::Uniform,
                5,
                3,
                1,
                sched.alpha_bar(t - 1).unwrap(),
                sched.alpha_bar(t).unwrap(),
            )
            .unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
