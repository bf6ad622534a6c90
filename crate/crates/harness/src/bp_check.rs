//! Belief propagation against explicit enumeration.

use memlab_core::bp::{brute_force_marginals, leaf_evidence, run_bp};
use memlab_core::grammar::Grammar;
use memlab_core::noise::{apply_forward, cumulative_kernel, NoiseSchedule};
use memlab_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpReport {
    pub config_hash: String,
    pub strings: usize,
    pub noise_levels: Vec<usize>,
    pub evidences: usize,
    pub max_tv: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `n` levels spread evenly over `1..=T`, both ends included.
pub fn spread_levels(steps: usize, n: usize) -> Vec<usize> {
    if n <= 1 {
        return vec![steps];
    }
    let mut out: Vec<usize> = (0..n).map(|i| 1 + (i * (steps - 1)) / (n - 1)).collect();
    out.dedup();
    out
}

/// For every level, noises `evidences` random grammar strings and compares
/// the BP leaf marginals with enumeration in total variation.
pub fn validate_bp(cfg: &RunConfig) -> Result<BpReport> {
    let grammar = Grammar::build(cfg.grammar_params())?;
    let strings = grammar.enumerate(cfg.bp.enumeration_limit)?.len();
    let schedule = NoiseSchedule::build(cfg.noise.schedule, cfg.noise.steps)?;
    let levels = spread_levels(cfg.noise.steps, cfg.bp.noise_levels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.data);
    let v = grammar.vocab();
    let mut max_tv = 0.0f64;
    for &t in &levels {
        let kernel = cumulative_kernel(cfg.noise.kind, v, &schedule, t)?;
        for _ in 0..cfg.bp.evidences {
            let x_t = apply_forward(&grammar.sample_datum(&mut rng), &kernel, &mut rng);
            let ev = leaf_evidence(x_t.tokens(), &kernel)?;
            let bp = run_bp(&grammar, &ev)?;
            let exact = brute_force_marginals(&grammar, &ev, cfg.bp.enumeration_limit)?;
            for (p, q) in bp.leaf_marginals.chunks(v).zip(exact.chunks(v)) {
                let tv = 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>();
                max_tv = max_tv.max(tv);
            }
        }
    }
    if !max_tv.is_finite() {
        return Err(Error::Format("non-finite marginal".into()));
    }
    Ok(BpReport {
        config_hash: cfg.hash()?,
        strings,
        noise_levels: levels,
        evidences: cfg.bp.evidences,
        max_tv,
        tolerance: cfg.bp.tolerance,
        passed: max_tv <= cfg.bp.tolerance,
    })
}
