//! Ancestral sampling with the mixture reverse kernel of any x0 predictor.

use memlab_core::bp::categorical;
use memlab_core::grammar::{Symbol, TokenSequence};
use memlab_core::noise::{KernelKind, NoiseSchedule};
use memlab_core::{Error, Result, X0Predictor};
use rand::Rng;

use crate::loss::{mixture, posterior_table};

/// Decreasing noise levels `T = t_0 > t_1 > ... > t_K = 0` with `K = jumps`
/// roughly even strides. `jumps >= T` gives every level.
pub fn time_grid(horizon: usize, jumps: usize) -> Vec<usize> {
    let k = jumps.clamp(1, horizon.max(1));
    let mut grid: Vec<usize> = (0..=k)
        .map(|i| ((horizon as f64) * (1.0 - i as f64 / k as f64)).round() as usize)
        .collect();
    grid.dedup();
    grid
}

/// Draws `n` sequences starting from the stationary distribution of the
/// forward process and jumping through `time_grid(T, jumps)`.
pub fn generate<R: Rng + ?Sized>(
    predictor: &dyn X0Predictor,
    kind: KernelKind,
    schedule: &NoiseSchedule,
    n: usize,
    jumps: usize,
    rng: &mut R,
) -> Result<Vec<TokenSequence>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let (d, v) = (predictor.dim(), predictor.vocab());
    if v == 0 || d == 0 {
        return Err(Error::ShapeMismatch("predictor with empty output".into()));
    }
    let states = match kind {
        KernelKind::Uniform => v,
        KernelKind::Absorbing => v + 1,
    };
    let mut x: Vec<Symbol> = match kind {
        KernelKind::Uniform => (0..n * d).map(|_| rng.random_range(0..v as Symbol)).collect(),
        KernelKind::Absorbing => vec![v as Symbol; n * d],
    };
    let grid = time_grid(schedule.len(), jumps);
    let mut phat = vec![0.0; n * d * v];
    let mut tables = vec![0.0; states * v * states];
    let mut probs = vec![0.0; states];
    for w in grid.windows(2) {
        let (t, s) = (w[0], w[1]);
        predictor.predict_x0(&x, &vec![t; n], &mut phat)?;
        let (ab_s, ab_t) = (schedule.alpha_bar(s)?, schedule.alpha_bar(t)?);
        for (x_t, table) in tables.chunks_mut(v * states).enumerate() {
            posterior_table(kind, v, x_t as Symbol, ab_s, ab_t, table)?;
        }
        for (k, token) in x.iter_mut().enumerate() {
            let table = &tables[*token as usize * v * states..(*token as usize + 1) * v * states];
            mixture(table, &phat[k * v..(k + 1) * v], &mut probs);
            *token = categorical(&probs, rng) as Symbol;
        }
    }
    Ok(x.chunks(d).map(|c| TokenSequence::new(c.to_vec())).collect())
}
