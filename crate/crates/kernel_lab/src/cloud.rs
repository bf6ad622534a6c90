//! Finite point clouds smoothed by isotropic Gaussian noise, and the exact
//! score of the resulting mixture.

use memlab_core::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// `P` points in `d` dimensions, stored row-major, with noise level `sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    dim: usize,
    points: Vec<f64>,
    pub sigma: f64,
}

/// Noise above this fraction of the closest pair breaks the separation
/// assumption behind the local-mode picture.
pub const SEPARATION_FACTOR: f64 = 0.2;

impl GaussianCloud {
    pub fn new(dim: usize, points: Vec<f64>, sigma: f64) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::ShapeMismatch(format!("{} values for dimension {dim}", points.len())));
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("noise level {sigma} must be positive")));
        }
        Ok(Self { dim, points, sigma })
    }

    /// Points drawn from the standard Gaussian prior.
    pub fn sample<R: Rng + ?Sized>(size: usize, dim: usize, sigma: f64, rng: &mut R) -> Result<Self> {
        let points = (0..size * dim).map(|_| StandardNormal.sample(rng)).collect();
        Self::new(dim, points, sigma)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                best = best.min(sq_dist(self.point(i), self.point(j)).sqrt());
            }
        }
        best
    }

    /// Whether `sigma <= 0.2 * min distance`.
    pub fn is_separated(&self) -> bool {
        self.len() < 2 || self.sigma <= SEPARATION_FACTOR * self.min_pairwise_distance()
    }

    /// `x_j + sigma * eps` for a chosen point.
    pub fn perturb(&self, j: usize, eps: &[f64], out: &mut [f64]) {
        for ((o, c), e) in out.iter_mut().zip(self.point(j)).zip(eps) {
            *o = c + self.sigma * e;
        }
    }

    /// `log p_sigma(x)` of the equal-weight mixture.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let s2 = self.sigma * self.sigma;
        let logits: Vec<f64> = (0..self.len()).map(|j| -sq_dist(x, self.point(j)) / (2.0 * s2)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        lse - (self.len() as f64).ln() - 0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI * s2).ln()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `grad_x log p_sigma(x)`, written to `out`.
pub fn mixture_score_into(x: &[f64], cloud: &GaussianCloud, out: &mut [f64]) {
    let s2 = cloud.sigma * cloud.sigma;
    let logits: Vec<f64> = (0..cloud.len()).map(|j| -sq_dist(x, cloud.point(j)) / (2.0 * s2)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let w = w / total;
        for ((o, c), xi) in out.iter_mut().zip(cloud.point(j)).zip(x) {
            *o += w * (c - xi) / s2;
        }
    }
}

pub fn mixture_score(x: &[f64], cloud: &GaussianCloud) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    mixture_score_into(x, cloud, &mut out);
    out
}
