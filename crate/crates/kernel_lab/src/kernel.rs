//! Kernels with a small-distance power expansion and a Monte-Carlo estimate
//! of the Rayleigh quotient of a localized mode.

use std::f64::consts::PI;

use memlab_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::GaussianCloud;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `kappa(r) = 1`.
    Constant,
    /// `kappa(r) = 1 + coef * r^nu`.
    PowerLaw { coef: f64, nu: f64 },
    /// Tangent kernel of `x -> N^{-1/2} sum_k a_k relu(w_k . x / sqrt(d))`
    /// at standard Gaussian init, without biases.
    ReluNtk,
}

impl KernelSpec {
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            KernelSpec::Constant => 1.0,
            KernelSpec::PowerLaw { coef, nu } => {
                let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                1.0 + coef * r2.powf(0.5 * nu)
            }
            KernelSpec::ReluNtk => relu_ntk(x, y),
        }
    }

    /// Leading exponent of the non-analytic part at small distance.
    pub fn exponent(&self) -> Option<f64> {
        match *self {
            KernelSpec::Constant => None,
            KernelSpec::PowerLaw { nu, .. } => Some(nu),
            KernelSpec::ReluNtk => Some(1.0),
        }
    }
}

fn relu_ntk(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return 0.0;
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let cos = (dot / (nx * ny)).clamp(-1.0, 1.0);
    let theta = cos.acos();
    // First-layer term E[relu'relu'] x.y plus readout term E[relu relu].
    let k0 = (PI - theta) / (2.0 * PI);
    let k1 = (theta.sin() + (PI - theta) * cos) / (2.0 * PI);
    (dot * k0 + nx * ny * k1) / d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cutoff {
    /// `R(r) = exp(-r)`.
    Exponential,
    /// `R(r) = exp(-r^2 / 2)`.
    Gaussian,
}

impl Cutoff {
    pub fn eval(self, r: f64) -> f64 {
        match self {
            Cutoff::Exponential => (-r).exp(),
            Cutoff::Gaussian => (-0.5 * r * r).exp(),
        }
    }
}

/// The vector field `psi_i(x) = (x - x_i) R(|x - x_i| / sigma)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeAnsatz {
    pub center: usize,
    pub cutoff: Cutoff,
}

impl ModeAnsatz {
    pub fn new(center: usize) -> Self {
        Self { center, cutoff: Cutoff::Exponential }
    }

    pub fn eval_into(&self, cloud: &GaussianCloud, x: &[f64], out: &mut [f64]) {
        let c = cloud.point(self.center);
        let mut r2 = 0.0;
        for ((o, xi), ci) in out.iter_mut().zip(x).zip(c) {
            *o = xi - ci;
            r2 += *o * *o;
        }
        let w = self.cutoff.eval(r2.sqrt() / cloud.sigma);
        out.iter_mut().for_each(|o| *o *= w);
    }

    /// Mixture components where the mode is not lost to rounding against
    /// its value on the central component.
    fn support(&self, cloud: &GaussianCloud) -> Vec<usize> {
        let reach = (cloud.dim() as f64).sqrt() + 10.0;
        let c = cloud.point(self.center);
        (0..cloud.len())
            .filter(|&j| {
                let dist: f64 = cloud.point(j).iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                self.cutoff.eval((dist / cloud.sigma - reach).max(0.0)) > 1e-17
            })
            .collect()
    }
}

/// Monte-Carlo estimate of a ratio of expectations with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenEstimate {
    pub lambda: f64,
    pub stderr: f64,
    pub samples: usize,
    pub warning: Option<String>,
}

const BLOCK: usize = 4096;

/// Sums of a, b, a^2, b^2 and ab over a block of samples.
type Moments = [f64; 5];

fn pairwise(xs: &[Moments]) -> Moments {
    match xs.len() {
        0 => [0.0; 5],
        1 => xs[0],
        n => {
            let (l, r) = xs.split_at(n / 2);
            let (a, b) = (pairwise(l), pairwise(r));
            std::array::from_fn(|k| a[k] + b[k])
        }
    }
}

fn block_rng(seed: u64, block: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block as u64);
    rng
}

/// `<psi_i, K psi_i> / <psi_i, psi_i>` in `L^2(p_sigma)`.
///
/// Both integrals are taken over the full mixture. Each mixture component is
/// written as `x_j + sigma u` with `u ~ N(0, I_d)`; components where the mode
/// is below double-precision underflow are dropped. Every draw `(u, v)` is
/// averaged with its sign flips, so the constant part of any kernel cancels
/// exactly on the central component.
pub fn eigen_oracle(
    kernel: &KernelSpec,
    cloud: &GaussianCloud,
    mode: &ModeAnsatz,
    n_mc: usize,
    seed: u64,
) -> Result<EigenEstimate> {
    if mode.center >= cloud.len() {
        return Err(Error::InvalidArgument(format!("mode center {} outside cloud of {}", mode.center, cloud.len())));
    }
    if !cloud.is_separated() {
        return Err(Error::InvalidArgument(format!(
            "sigma {} exceeds the separation bound {}",
            cloud.sigma,
            crate::cloud::SEPARATION_FACTOR * cloud.min_pairwise_distance()
        )));
    }
    if n_mc < 2 {
        return Err(Error::InvalidArgument("need at least two Monte-Carlo samples".into()));
    }
    let support = mode.support(cloud);
    let p = cloud.len() as f64;
    let d = cloud.dim();
    let blocks = n_mc.div_ceil(BLOCK);
    let moments: Vec<Moments> = (0..blocks)
        .into_par_iter()
        .map(|blk| {
            let mut rng = block_rng(seed, blk);
            let count = BLOCK.min(n_mc - blk * BLOCK);
            let (mut u, mut v) = (vec![0.0; d], vec![0.0; d]);
            let m = support.len();
            // Points and mode values for +/-u and +/-v at every component.
            let mut xs = vec![0.0; 2 * m * d];
            let mut ys = vec![0.0; 2 * m * d];
            let mut pu = vec![0.0; 2 * m * d];
            let mut pv = vec![0.0; 2 * m * d];
            let mut acc = [0.0; 5];
            for _ in 0..count {
                u.iter_mut().for_each(|e| *e = StandardNormal.sample(&mut rng));
                v.iter_mut().for_each(|e| *e = StandardNormal.sample(&mut rng));
                let mut den = 0.0;
                for (a, &j) in support.iter().enumerate() {
                    for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
                        let row = (2 * a + s) * d;
                        for k in 0..d {
                            xs[row + k] = cloud.point(j)[k] + sign * cloud.sigma * u[k];
                            ys[row + k] = cloud.point(j)[k] + sign * cloud.sigma * v[k];
                        }
                        mode.eval_into(cloud, &xs[row..row + d], &mut pu[row..row + d]);
                        mode.eval_into(cloud, &ys[row..row + d], &mut pv[row..row + d]);
                        den += pu[row..row + d].iter().map(|e| e * e).sum::<f64>();
                        den += pv[row..row + d].iter().map(|e| e * e).sum::<f64>();
                    }
                }
                let mut num = 0.0;
                for a in 0..2 * m {
                    let ra = a * d;
                    let ua = &pu[ra..ra + d];
                    if ua.iter().all(|e| *e == 0.0) {
                        continue;
                    }
                    for b in 0..2 * m {
                        let rb = b * d;
                        let dot: f64 = ua.iter().zip(&pv[rb..rb + d]).map(|(x, y)| x * y).sum();
                        if dot != 0.0 {
                            num += dot * kernel.eval(&xs[ra..ra + d], &ys[rb..rb + d]);
                        }
                    }
                }
                let num = num / (4.0 * p * p);
                let den = den / (4.0 * p);
                acc[0] += num;
                acc[1] += den;
                acc[2] += num * num;
                acc[3] += den * den;
                acc[4] += num * den;
            }
            acc
        })
        .collect();
    let [sa, sb, saa, sbb, sab] = pairwise(&moments);
    let n = n_mc as f64;
    let lambda = sa / sb;
    // Delta method for a ratio of means.
    let resid = (saa - 2.0 * lambda * sab + lambda * lambda * sbb).max(0.0);
    let stderr = (resid / (n * (n - 1.0))).sqrt() / (sb / n);
    let warning = (stderr > 0.1 * lambda.abs())
        .then(|| format!("Monte-Carlo error {stderr:.3e} exceeds 10% of the estimate {lambda:.3e}"));
    Ok(EigenEstimate { lambda, stderr, samples: n_mc, warning })
}

/// Normalized overlap `<psi_a, psi_b> / (|psi_a| |psi_b|)` in `L^2(p_sigma)`.
pub fn mode_overlap(cloud: &GaussianCloud, a: &ModeAnsatz, b: &ModeAnsatz, n_mc: usize, seed: u64) -> f64 {
    let d = cloud.dim();
    let mut rng = block_rng(seed, 0);
    let (mut u, mut x) = (vec![0.0; d], vec![0.0; d]);
    let (mut pa, mut pb) = (vec![0.0; d], vec![0.0; d]);
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for _ in 0..n_mc {
        u.iter_mut().for_each(|e| *e = StandardNormal.sample(&mut rng));
        for j in 0..cloud.len() {
            cloud.perturb(j, &u, &mut x);
            a.eval_into(cloud, &x, &mut pa);
            b.eval_into(cloud, &x, &mut pb);
            for k in 0..d {
                ab += pa[k] * pb[k];
                aa += pa[k] * pa[k];
                bb += pb[k] * pb[k];
            }
        }
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Least squares fit of `log y = slope log x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_powerlaw(xs: &[f64], ys: &[f64]) -> Result<PowerLawFit> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch(format!("{} abscissae, {} ordinates", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::InvalidArgument(format!("power-law fit needs 3 points, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("power-law fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx <= 1e-24 * n {
        return Err(Error::InvalidArgument("degenerate design: all abscissae equal".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { slope * sxy / syy };
    Ok(PowerLawFit { slope, intercept: my - slope * mx, r2 })
}
