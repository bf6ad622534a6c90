//! Memorization time along one axis of the (P, sigma, batch) space.

use memlab_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::GaussianCloud;
use crate::kernel::{fit_powerlaw, PowerLawFit};
use crate::net::{train_score_net, Scaling, ScoreTrainConfig, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Number of training points.
    P,
    /// Noise variance `sigma^2`; the fit is against `sigma`.
    Sigma,
    /// Minibatch size.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: Axis,
    pub grid: Vec<f64>,
    pub dim: usize,
    pub train_size: usize,
    pub sigma2: f64,
    pub test_size: usize,
    pub width: usize,
    pub init: Scaling,
    pub alpha: f64,
    pub lr: f64,
    /// 0 means full batch.
    pub batch: usize,
    pub target: Target,
    pub max_steps: u64,
    pub checkpoints_per_decade: usize,
    pub eval_draws: usize,
    pub delta: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axis: Axis::P,
            grid: vec![32.0, 64.0, 128.0, 256.0],
            dim: 64,
            train_size: 128,
            sigma2: 3.2e-2,
            test_size: 256,
            width: 1024,
            init: Scaling::Lazy,
            alpha: 4.0,
            lr: 10.0,
            batch: 0,
            target: Target::Mixture,
            max_steps: 100_000,
            checkpoints_per_decade: 16,
            eval_draws: 4,
            delta: memlab_core::metrics::DEFAULT_DELTA,
            patience: memlab_core::metrics::DEFAULT_PATIENCE,
            seed: 0,
        }
    }
}

impl SweepConfig {
    /// Training settings shared by every grid point.
    pub fn train_config(&self) -> ScoreTrainConfig {
        ScoreTrainConfig {
            width: self.width,
            scaling: self.init,
            alpha: self.alpha,
            lr: self.lr,
            batch: self.batch,
            target: self.target,
            max_steps: self.max_steps,
            checkpoints_per_decade: self.checkpoints_per_decade,
            eval_draws: self.eval_draws,
            delta: self.delta,
            patience: self.patience,
            extra_checkpoints: 0,
        }
    }

    /// `(P, sigma^2, batch)` at one grid value.
    pub fn point(&self, value: f64) -> (usize, f64, usize) {
        match self.axis {
            Axis::P => (value as usize, self.sigma2, self.batch),
            Axis::Sigma => (self.train_size, value, self.batch),
            Axis::Batch => (self.train_size, self.sigma2, value as usize),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.len() < 3 {
            return Err(Error::InvalidArgument(format!("sweep grid needs 3 values, got {}", self.grid.len())));
        }
        if self.grid.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidArgument("sweep grid values must be positive".into()));
        }
        if matches!(self.axis, Axis::P | Axis::Batch) && self.grid.iter().any(|v| v.fract() != 0.0) {
            return Err(Error::InvalidArgument("sizes in the sweep grid must be integers".into()));
        }
        for &v in &self.grid {
            let (p, _, b) = self.point(v);
            if b > p {
                return Err(Error::InvalidArgument(format!("batch {b} exceeds {p} points")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub tau_mem: Option<u64>,
    /// The detector never fired before the step cap.
    pub censored: bool,
    pub steps_run: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: Axis,
    pub rows: Vec<SweepRow>,
    /// Power law through the uncensored rows, when there are at least three.
    pub fit: Option<PowerLawFit>,
}

impl SweepTable {
    /// Largest over smallest detected time.
    pub fn spread(&self) -> Option<f64> {
        let taus: Vec<f64> = self.rows.iter().filter_map(|r| r.tau_mem).map(|t| t as f64).collect();
        if taus.is_empty() {
            return None;
        }
        let max = taus.iter().copied().fold(f64::MIN, f64::max);
        let min = taus.iter().copied().fold(f64::MAX, f64::min);
        Some(max / min)
    }
}

/// Clouds shared across the grid: every run sees the same leading training
/// points, the same test points and the same training seed.
fn clouds(cfg: &SweepConfig, p: usize, sigma2: f64) -> Result<(GaussianCloud, GaussianCloud)> {
    let sigma = sigma2.sqrt();
    let train = GaussianCloud::sample(p, cfg.dim, sigma, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let test = GaussianCloud::sample(cfg.test_size, cfg.dim, sigma, &mut rng)?;
    Ok((train, test))
}

pub fn sweep_tau_mem(cfg: &SweepConfig) -> Result<SweepTable> {
    cfg.validate()?;
    let rows: Vec<SweepRow> = cfg
        .grid
        .par_iter()
        .map(|&value| {
            let (p, sigma2, batch) = cfg.point(value);
            let (train, test) = clouds(cfg, p, sigma2)?;
            let tc = ScoreTrainConfig { batch, ..cfg.train_config() };
            let (_, trace) = train_score_net(&train, &test, &tc, cfg.seed.wrapping_add(1))?;
            Ok(SweepRow {
                value,
                tau_mem: trace.tau_mem,
                censored: trace.tau_mem.is_none(),
                steps_run: trace.steps.last().copied().unwrap_or(0),
            })
        })
        .collect::<Result<_>>()?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter_map(|r| {
            let x = if cfg.axis == Axis::Sigma { r.value.sqrt() } else { r.value };
            r.tau_mem.map(|t| (x, t as f64))
        })
        .unzip();
    let fit = if xs.len() >= 3 { Some(fit_powerlaw(&xs, &ys)?) } else { None };
    Ok(SweepTable { axis: cfg.axis, rows, fit })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_grids_are_rejected() {
        let cfg = SweepConfig { grid: vec![32.0, 64.0], ..Default::default() };
        assert!(sweep_tau_mem(&cfg).is_err());
        let cfg = SweepConfig { axis: Axis::Batch, grid: vec![8.0, 64.0, 256.0], ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn capped_runs_are_censored() {
        let cfg = SweepConfig { grid: vec![4.0, 6.0, 8.0], dim: 4, width: 8, test_size: 8, max_steps: 5, lr: 0.0, ..Default::default() };
        let table = sweep_tau_mem(&cfg).unwrap();
        assert!(table.rows.iter().all(|r| r.censored && r.tau_mem.is_none() && r.steps_run == 5));
        assert!(table.fit.is_none());
        assert_eq!(table.spread(), None);
    }

    #[test]
    fn grid_points_share_leading_points() {
        let cfg = SweepConfig { dim: 3, ..Default::default() };
        let (a, ta) = clouds(&cfg, 4, 0.01).unwrap();
        let (b, tb) = clouds(&cfg, 8, 0.04).unwrap();
        assert_eq!(a.points(), &b.points()[..12]);
        assert_eq!(ta.points(), tb.points());
    }
}
