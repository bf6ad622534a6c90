//! Variational-bound loss for x0-parameterized discrete diffusion.
//!
//! The reverse kernel is the mixture
//! `p(x_{t-1} | x_t) = sum_{x0} q(x_{t-1} | x_t, x0) * phat(x0 | x_t)`.
//! At `t = 1` the term is the cross-entropy of `phat` against the clean token.

use memlab_core::grammar::Symbol;
use memlab_core::noise::{jump_posterior_into, KernelKind, NoiseSchedule};
use memlab_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the auxiliary cross-entropy term; zero gives the plain bound.
    pub ce_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { ce_weight: 0.0 }
    }
}

/// Per-batch loss value with its two components, all token averages.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValue {
    pub total: f64,
    pub bound: f64,
    pub cross_entropy: f64,
}

/// Posterior rows `q(. | x_t, x0)` for every candidate `x0`, flattened
/// `v * states`. Candidates that cannot produce `x_t` keep `x_t` unchanged.
pub fn posterior_table(
    kind: KernelKind,
    vocab: usize,
    x_t: Symbol,
    alpha_bar_prev: f64,
    alpha_bar_t: f64,
    out: &mut [f64],
) -> Result<()> {
    let states = out.len() / vocab;
    for (x0, row) in out.chunks_mut(states).enumerate() {
        match jump_posterior_into(kind, vocab, x_t, x0 as Symbol, alpha_bar_prev, alpha_bar_t, row) {
            Ok(()) => {}
            Err(Error::ImpossibleTransition) => {
                row.iter_mut().for_each(|r| *r = 0.0);
                row[x_t as usize] = 1.0;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Mixture reverse kernel from a table of posteriors and `phat`.
pub fn mixture(table: &[f64], phat: &[f64], out: &mut [f64]) {
    let states = out.len();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (row, &w) in table.chunks(states).zip(phat) {
        for (o, r) in out.iter_mut().zip(row) {
            *o += w * r;
        }
    }
}

const FLOOR: f64 = 1e-300;

/// Loss of a single token and its gradient with respect to the logits.
/// `phat` is the softmax of the logits; `dlogits` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn token_loss(
    kind: KernelKind,
    schedule: &NoiseSchedule,
    config: &LossConfig,
    x0: Symbol,
    x_t: Symbol,
    t: usize,
    phat: &[f64],
    dlogits: &mut [f64],
) -> Result<(f64, f64)> {
    let v = phat.len();
    let mut dphat = vec![0.0; v];
    let ce = -phat[x0 as usize].max(FLOOR).ln();
    let mut bound = 0.0;
    let ce_weight = if t == 1 { 1.0 + config.ce_weight } else { config.ce_weight };
    dphat[x0 as usize] -= ce_weight / phat[x0 as usize].max(FLOOR);
    if t == 1 {
        bound = ce;
    } else {
        let states = match kind {
            KernelKind::Uniform => v,
            KernelKind::Absorbing => v + 1,
        };
        let (ab_prev, ab_t) = (schedule.alpha_bar(t - 1)?, schedule.alpha_bar(t)?);
        let mut table = vec![0.0; v * states];
        posterior_table(kind, v, x_t, ab_prev, ab_t, &mut table)?;
        let q = &table[x0 as usize * states..(x0 as usize + 1) * states];
        let mut p = vec![0.0; states];
        mixture(&table, phat, &mut p);
        let mut ratio = vec![0.0; states];
        for j in 0..states {
            if q[j] > 0.0 {
                let pj = p[j].max(FLOOR);
                bound += q[j] * (q[j].ln() - pj.ln());
                ratio[j] = q[j] / pj;
            }
        }
        bound = bound.max(0.0);
        for (i, row) in table.chunks(states).enumerate() {
            dphat[i] -= row.iter().zip(&ratio).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let mean: f64 = phat.iter().zip(&dphat).map(|(p, g)| p * g).sum();
    for ((d, p), g) in dlogits.iter_mut().zip(phat).zip(&dphat) {
        *d = p * (g - mean);
    }
    Ok((bound, ce))
}

/// Token-averaged loss of a batch, with gradients of the total written to
/// `dlogits` (same layout as `phat`, `n * d * v`).
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    kind: KernelKind,
    schedule: &NoiseSchedule,
    config: &LossConfig,
    x0: &[Symbol],
    x_t: &[Symbol],
    t: &[usize],
    phat: &[f64],
    dlogits: &mut [f64],
) -> Result<LossValue> {
    let tokens = x0.len();
    if tokens == 0 || x_t.len() != tokens || phat.len() % tokens != 0 || dlogits.len() != phat.len() {
        return Err(Error::ShapeMismatch("loss inputs".into()));
    }
    let v = phat.len() / tokens;
    let d = tokens / t.len();
    let mut value = LossValue::default();
    for k in 0..tokens {
        let (b, ce) = token_loss(
            kind,
            schedule,
            config,
            x0[k],
            x_t[k],
            t[k / d],
            &phat[k * v..(k + 1) * v],
            &mut dlogits[k * v..(k + 1) * v],
        )?;
        value.bound += b;
        value.cross_entropy += ce;
    }
    let scale = 1.0 / tokens as f64;
    dlogits.iter_mut().for_each(|g| *g *= scale);
    value.bound *= scale;
    value.cross_entropy *= scale;
    value.total = value.bound + config.ce_weight * value.cross_entropy;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn softmax(z: &[f64]) -> Vec<f64> {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    /// Reverse kernel from the dense joint `q(x_t | x_{t-1}) q(x_{t-1} | x0)`.
    fn dense_mixture(kind: KernelKind, v: usize, sched: &NoiseSchedule, x_t: u32, t: usize, phat: &[f64]) -> Vec<f64> {
        use memlab_core::noise::{cumulative_kernel, step_kernel};
        let step = step_kernel(kind, v, sched.beta(t).unwrap()).unwrap();
        let prev = cumulative_kernel(kind, v, sched, t - 1).unwrap();
        let states = step.num_states();
        let mut out = vec![0.0; states];
        for (x0, &w) in phat.iter().enumerate() {
            let joint: Vec<f64> = (0..states as u32).map(|j| prev.prob(x0 as u32, j) * step.prob(j, x_t)).collect();
            let z: f64 = joint.iter().sum();
            if z == 0.0 {
                out[x_t as usize] += w;
                continue;
            }
            for (o, j) in out.iter_mut().zip(joint) {
                *o += w * j / z;
            }
        }
        out
    }

    #[test]
    fn mixture_matches_dense_bayes() {
        let sched = NoiseSchedule::linear(20).unwrap();
        let phat = softmax(&[0.3, -1.0, 2.0, 0.1]);
        for kind in [KernelKind::Uniform, KernelKind::Absorbing] {
            let states = if kind == KernelKind::Uniform { 4 } else { 5 };
            for x_t in 0..states as u32 {
                for t in [2, 7, 20] {
                    let mut table = vec![0.0; 4 * states];
                    posterior_table(kind, 4, x_t, sched.alpha_bar(t - 1).unwrap(), sched.alpha_bar(t).unwrap(), &mut table)
                        .unwrap();
                    let mut p = vec![0.0; states];
                    mixture(&table, &phat, &mut p);
                    let want = dense_mixture(kind, 4, &sched, x_t, t, &phat);
                    for (a, b) in p.iter().zip(&want) {
                        assert!((a - b).abs() < 1e-12, "{kind:?} x_t={x_t} t={t}");
                    }
                }
            }
        }
    }

    #[test]
    fn exact_prediction_has_zero_bound() {
        let sched = NoiseSchedule::linear(20).unwrap();
        let mut phat = vec![1e-300; 5];
        phat[2] = 1.0;
        let mut g = vec![0.0; 5];
        for kind in [KernelKind::Uniform, KernelKind::Absorbing] {
            for x_t in [2, 4] {
                let (b, _) = token_loss(kind, &sched, &LossConfig::default(), 2, x_t, 10, &phat, &mut g).unwrap();
                assert!(b.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_prediction_has_log_v_cross_entropy() {
        let sched = NoiseSchedule::linear(20).unwrap();
        let phat = vec![0.125; 8];
        let mut g = vec![0.0; 8];
        let cfg = LossConfig { ce_weight: 0.5 };
        let (_, ce) = token_loss(KernelKind::Uniform, &sched, &cfg, 3, 5, 9, &phat, &mut g).unwrap();
        assert!((ce - 8f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let sched = NoiseSchedule::linear(30).unwrap();
        let z = vec![0.4, -0.7, 1.1, 0.0, -0.2];
        let cfg = LossConfig { ce_weight: 0.3 };
        let cases = [
            (KernelKind::Uniform, 1u32, 3u32, 12usize),
            (KernelKind::Uniform, 4, 4, 2),
            (KernelKind::Uniform, 0, 2, 1),
            (KernelKind::Absorbing, 2, 5, 17),
            (KernelKind::Absorbing, 2, 2, 17),
            (KernelKind::Absorbing, 3, 5, 1),
        ];
        for (kind, x0, x_t, t) in cases {
            let f = |z: &[f64]| {
                let mut g = vec![0.0; 5];
                let (b, ce) = token_loss(kind, &sched, &cfg, x0, x_t, t, &softmax(z), &mut g).unwrap();
                b + cfg.ce_weight * ce
            };
            let mut g = vec![0.0; 5];
            token_loss(kind, &sched, &cfg, x0, x_t, t, &softmax(&z), &mut g).unwrap();
            for i in 0..5 {
                let h = 1e-6;
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[i] += h;
                zm[i] -= h;
                let fd = (f(&zp) - f(&zm)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-7 * (1.0 + fd.abs()), "{kind:?} {i}: {fd} vs {}", g[i]);
            }
        }
    }
}
