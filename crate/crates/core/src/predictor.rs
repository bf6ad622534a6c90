//! Interface shared by every model of `p(x_0 | x_t)`: trained networks, the
//! exact BP oracle, and trivial baselines.

use crate::bp::exact_x0_marginals;
use crate::error::{Error, Result};
use crate::grammar::{Grammar, Symbol};
use crate::noise::{KernelKind, NoiseSchedule};

pub trait X0Predictor {
    /// Sequence length `d`.
    fn dim(&self) -> usize;
    /// Number of data symbols `v` (the mask state, if any, is not predicted).
    fn vocab(&self) -> usize;
    /// Fills `out` (flat `batch * d * v`) with normalized predictions for the
    /// noisy batch `x_t` (flat `batch * d`) at noise levels `t`.
    fn predict_x0(&self, x_t: &[Symbol], t: &[usize], out: &mut [f64]) -> Result<()>;
}

pub(crate) fn check_batch(p: &dyn X0Predictor, x_t: &[Symbol], t: &[usize], out: &[f64]) -> Result<()> {
    let (d, v) = (p.dim(), p.vocab());
    if x_t.len() != t.len() * d || out.len() != x_t.len() * v {
        return Err(Error::ShapeMismatch(format!(
            "batch of {} levels, {} tokens, {} outputs for d={d} v={v}",
            t.len(),
            x_t.len(),
            out.len()
        )));
    }
    Ok(())
}

/// Exact posterior marginals computed by belief propagation.
#[derive(Debug, Clone)]
pub struct BpOracle {
    pub grammar: Grammar,
    pub kind: KernelKind,
    pub schedule: NoiseSchedule,
}

impl BpOracle {
    pub fn new(grammar: Grammar, kind: KernelKind, schedule: NoiseSchedule) -> Self {
        Self { grammar, kind, schedule }
    }
}

impl X0Predictor for BpOracle {
    fn dim(&self) -> usize {
        self.grammar.dim()
    }

    fn vocab(&self) -> usize {
        self.grammar.vocab()
    }

    fn predict_x0(&self, x_t: &[Symbol], t: &[usize], out: &mut [f64]) -> Result<()> {
        check_batch(self, x_t, t, out)?;
        let keeps = t.iter().map(|&t| self.schedule.alpha_bar(t)).collect::<Result<Vec<_>>>()?;
        exact_x0_marginals(&self.grammar, self.kind, &keeps, x_t, out)
    }
}

/// Predicts the uniform distribution everywhere.
#[derive(Debug, Clone, Copy)]
pub struct UniformPredictor {
    pub dim: usize,
    pub vocab: usize,
}

impl X0Predictor for UniformPredictor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn vocab(&self) -> usize {
        self.vocab
    }

    fn predict_x0(&self, x_t: &[Symbol], t: &[usize], out: &mut [f64]) -> Result<()> {
        check_batch(self, x_t, t, out)?;
        out.fill(1.0 / self.vocab as f64);
        Ok(())
    }
}
