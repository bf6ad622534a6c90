//! Copy detection, grammar-validity errors, model distances, rule statistics
//! and memorization-onset detection.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{Dataset, Grammar, Symbol, TokenSequence};
use crate::noise::{apply_forward, cumulative_kernel, KernelKind, NoiseSchedule};
use crate::predictor::X0Predictor;

pub const DEFAULT_DELTA: f64 = 0.05;
pub const DEFAULT_PATIENCE: usize = 3;
pub const DEFAULT_COPY_ONSET: f64 = 0.05;

/// Normalized Hamming distance from each generated string to its nearest
/// training string.
pub fn nn_distances(generated: &[TokenSequence], trainset: &Dataset) -> Result<Vec<f64>> {
    if trainset.is_empty() {
        return Err(Error::EmptyReference);
    }
    let d = trainset.items()[0].len();
    generated
        .iter()
        .map(|x| {
            if x.len() != d {
                return Err(Error::LengthMismatch { expected: d, got: x.len() });
            }
            let best = trainset.iter().map(|y| x.hamming(y)).min().unwrap_or(d);
            Ok(best as f64 / d as f64)
        })
        .collect()
}

pub fn mean_nn_hamming(generated: &[TokenSequence], trainset: &Dataset) -> Result<f64> {
    let dist = nn_distances(generated, trainset)?;
    Ok(mean(&dist))
}

/// Fraction of generated strings within normalized Hamming distance `theta`
/// of some training string.
pub fn copy_fraction(generated: &[TokenSequence], trainset: &Dataset, theta: f64) -> Result<f64> {
    if trainset.is_empty() {
        return Err(Error::EmptyReference);
    }
    if !(0.0..1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!("copy threshold {theta} outside [0, 1)")));
    }
    if generated.is_empty() {
        return Ok(0.0);
    }
    if theta == 0.0 {
        let set: HashSet<&TokenSequence> = trainset.iter().collect();
        let hits = generated.iter().filter(|x| set.contains(x)).count();
        return Ok(hits as f64 / generated.len() as f64);
    }
    let dist = nn_distances(generated, trainset)?;
    Ok(dist.iter().filter(|&&r| r <= theta).count() as f64 / dist.len() as f64)
}

/// Ratio of the distances to the nearest and second-nearest training points.
pub fn l2_ratio(x: &[f64], trainset: &[Vec<f64>]) -> Result<f64> {
    if trainset.len() < 2 {
        return Err(Error::TooFewReferences { needed: 2, got: trainset.len() });
    }
    let (mut first, mut second) = (f64::INFINITY, f64::INFINITY);
    for y in trainset {
        if y.len() != x.len() {
            return Err(Error::LengthMismatch { expected: x.len(), got: y.len() });
        }
        let dist = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dist < first {
            second = first;
            first = dist;
        } else if dist < second {
            second = dist;
        }
    }
    if second == 0.0 {
        return Ok(0.0);
    }
    Ok(first / second)
}

/// Copy rule for real vectors: nearest over second-nearest distance below 1/3.
pub fn l2_ratio_copy(x: &[f64], trainset: &[Vec<f64>]) -> Result<bool> {
    Ok(l2_ratio(x, trainset)? < 1.0 / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    /// A string counts as an error at layer `l` if any block up to `l` is invalid.
    #[default]
    Strict,
    /// Mean fraction of invalid blocks at each layer.
    Fractional,
}

pub fn error_fraction_per_layer(grammar: &Grammar, generated: &[TokenSequence], mode: ErrorMode) -> Vec<f64> {
    let depth = grammar.depth();
    let mut acc = vec![0.0; depth];
    if generated.is_empty() {
        return acc;
    }
    for x in generated {
        match mode {
            ErrorMode::Strict => {
                for (a, ok) in acc.iter_mut().zip(grammar.validate_layers(x)) {
                    *a += (!ok) as u8 as f64;
                }
            }
            ErrorMode::Fractional => {
                for (a, f) in acc.iter_mut().zip(grammar.layer_validity_fractions(x)) {
                    *a += 1.0 - f;
                }
            }
        }
    }
    acc.iter_mut().for_each(|a| *a /= generated.len() as f64);
    acc
}

const NORMALIZATION_TOL: f64 = 1e-9;

/// Hellinger distance between two probability vectors.
pub fn hellinger(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} outcomes", p.len(), q.len())));
    }
    for r in [p, q] {
        let total: f64 = r.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL || r.iter().any(|&x| x < 0.0) {
            return Err(Error::NotNormalized(total));
        }
    }
    Ok(hellinger_unchecked(p, q))
}

fn hellinger_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let s: f64 = p.iter().zip(q).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
    (0.5 * s).sqrt().min(1.0)
}

/// Noisy inputs on which to compare predictors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub dim: usize,
    /// Flat `n * d` noisy tokens.
    pub x_t: Vec<Symbol>,
    pub t: Vec<usize>,
}

impl ProbeSet {
    /// One forward trajectory per clean datum, at a uniformly drawn level.
    pub fn from_data<R: Rng + ?Sized>(
        data: &[TokenSequence],
        vocab: usize,
        kind: KernelKind,
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        let dim = data.first().map_or(0, |x| x.len());
        let mut x_t = Vec::with_capacity(data.len() * dim);
        let mut t = Vec::with_capacity(data.len());
        for x in data {
            let level = rng.random_range(1..=schedule.len());
            let kernel = cumulative_kernel(kind, vocab, schedule, level)?;
            x_t.extend_from_slice(apply_forward(x, &kernel, rng).tokens());
            t.push(level);
        }
        Ok(Self { dim, x_t, t })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

const PROBE_CHUNK: usize = 256;

/// Mean per-token Hellinger distance between two predictors over `probes`.
pub fn model_distance(a: &dyn X0Predictor, b: &dyn X0Predictor, probes: &ProbeSet) -> Result<f64> {
    if a.dim() != b.dim() || a.vocab() != b.vocab() || a.dim() != probes.dim {
        return Err(Error::ShapeMismatch(format!(
            "models ({}, {}) and ({}, {}) on probes of length {}",
            a.dim(),
            a.vocab(),
            b.dim(),
            b.vocab(),
            probes.dim
        )));
    }
    if probes.is_empty() {
        return Ok(0.0);
    }
    let (d, v) = (a.dim(), a.vocab());
    let mut total = 0.0;
    for start in (0..probes.len()).step_by(PROBE_CHUNK) {
        let end = (start + PROBE_CHUNK).min(probes.len());
        let x = &probes.x_t[start * d..end * d];
        let t = &probes.t[start..end];
        let mut pa = vec![0.0; x.len() * v];
        let mut pb = vec![0.0; x.len() * v];
        a.predict_x0(x, t, &mut pa)?;
        b.predict_x0(x, t, &mut pb)?;
        total += pa.chunks(v).zip(pb.chunks(v)).map(|(p, q)| hellinger_unchecked(p, q)).sum::<f64>();
    }
    Ok(total / (probes.len() * d) as f64)
}

/// Rule usage of a set of strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleStatistics {
    pub n_valid: usize,
    pub n_invalid: usize,
    /// Per rule (index `(layer * v + a) * m + k`), mean number of uses per string.
    pub mean_counts: Vec<f64>,
    /// Per rule, uses divided by the number of occurrences of its parent
    /// symbol at that layer (`NaN` if the symbol never occurs).
    pub conditional_frequency: Vec<f64>,
    /// Parent-symbol occurrences, indexed `layer * v + a`.
    pub symbol_counts: Vec<u64>,
    /// Centered covariance of per-string rule counts, flat `R * R`.
    pub covariance: Vec<f64>,
}

impl RuleStatistics {
    pub fn num_rules(&self) -> usize {
        self.mean_counts.len()
    }

    pub fn cov(&self, i: usize, j: usize) -> f64 {
        self.covariance[i * self.num_rules() + j]
    }
}

pub fn rule_statistics(grammar: &Grammar, generated: &[TokenSequence]) -> RuleStatistics {
    let (v, m, depth) = (grammar.vocab(), grammar.synonyms(), grammar.depth());
    let r = v * m * depth;
    let mut counts: Vec<Vec<f64>> = Vec::new();
    let mut symbol_counts = vec![0u64; v * depth];
    let mut n_invalid = 0;
    for x in generated {
        let Some(tree) = grammar.parse(x) else {
            n_invalid += 1;
            continue;
        };
        let mut row = vec![0.0; r];
        for layer in 0..depth {
            for (&a, &k) in tree.levels[layer + 1].iter().zip(&tree.choices[layer]) {
                row[(layer * v + a as usize) * m + k as usize] += 1.0;
                symbol_counts[layer * v + a as usize] += 1;
            }
        }
        counts.push(row);
    }
    let n = counts.len();
    let mut mean_counts = vec![0.0; r];
    for row in &counts {
        for (acc, c) in mean_counts.iter_mut().zip(row) {
            *acc += c;
        }
    }
    let totals = mean_counts.clone();
    if n > 0 {
        mean_counts.iter_mut().for_each(|c| *c /= n as f64);
    }
    let conditional_frequency = totals
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let parent = symbol_counts[i / m];
            if parent == 0 {
                f64::NAN
            } else {
                c / parent as f64
            }
        })
        .collect();
    let mut covariance = vec![0.0; r * r];
    if n > 1 {
        for row in &counts {
            for i in 0..r {
                let di = row[i] - mean_counts[i];
                if di == 0.0 {
                    continue;
                }
                for j in 0..r {
                    covariance[i * r + j] += di * (row[j] - mean_counts[j]);
                }
            }
        }
        covariance.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    }
    RuleStatistics { n_valid: n, n_invalid, mean_counts, conditional_frequency, symbol_counts, covariance }
}

/// One row of a training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub tau: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub copy_fraction: f64,
    pub mean_nn_hamming: f64,
    /// Strict per-layer error fractions, layer 1 first.
    pub error_fraction: Vec<f64>,
    /// Fractional per-layer error fractions.
    #[serde(default)]
    pub block_error_fraction: Vec<f64>,
    /// Wall-clock seconds since the run started, when requested.
    #[serde(default)]
    pub timestamp: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub checkpoints: Vec<Checkpoint>,
    pub tau_mem: Option<u64>,
}

impl TrainTrace {
    pub fn push(&mut self, c: Checkpoint) -> Result<()> {
        if let Some(last) = self.checkpoints.last() {
            if c.tau <= last.tau {
                return Err(Error::InvalidArgument(format!("checkpoint {} after {}", c.tau, last.tau)));
            }
        }
        self.checkpoints.push(c);
        Ok(())
    }

    pub fn taus(&self) -> Vec<u64> {
        self.checkpoints.iter().map(|c| c.tau).collect()
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.checkpoints.iter().map(|c| c.val_loss).collect()
    }

    /// Loss-based onset with the given margin and patience.
    pub fn detect_tau_mem(&self, delta: f64, patience: usize) -> Option<u64> {
        detect_tau_mem(&self.taus(), &self.val_losses(), delta, patience)
    }

    /// First checkpoint whose copy fraction exceeds `threshold`.
    pub fn detect_copy_onset(&self, threshold: f64) -> Option<u64> {
        self.checkpoints.iter().find(|c| c.copy_fraction > threshold).map(|c| c.tau)
    }
}

/// First `tau` of the earliest run of `patience` consecutive checkpoints whose
/// value exceeds the running minimum by a relative margin `delta`.
pub fn detect_tau_mem(taus: &[u64], values: &[f64], delta: f64, patience: usize) -> Option<u64> {
    let patience = patience.max(1);
    let mut best = f64::INFINITY;
    let mut streak = 0;
    let mut start = None;
    for (&tau, &v) in taus.iter().zip(values) {
        best = best.min(v);
        if v > best * (1.0 + delta) {
            if streak == 0 {
                start = Some(tau);
            }
            streak += 1;
            if streak >= patience {
                return start;
            }
        } else {
            streak = 0;
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "regime", content = "layers", rename_all = "snake_case")]
pub enum RegimeLabel {
    PreLearning,
    /// Rules valid up to and including this many layers.
    PartialGeneralization(usize),
    FullGeneralization,
    Memorization,
}

impl RegimeLabel {
    pub fn name(&self) -> String {
        match self {
            RegimeLabel::PreLearning => "pre_learning".into(),
            RegimeLabel::PartialGeneralization(l) => format!("partial_generalization_{l}"),
            RegimeLabel::FullGeneralization => "full_generalization".into(),
            RegimeLabel::Memorization => "memorization".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeThresholds {
    pub copy: f64,
    pub error: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        Self { copy: 0.5, error: 0.15 }
    }
}

pub fn classify_regime(error_fraction: &[f64], copy_fraction: f64, th: RegimeThresholds) -> RegimeLabel {
    if copy_fraction > th.copy {
        return RegimeLabel::Memorization;
    }
    let passed = error_fraction.iter().take_while(|&&e| e < th.error).count();
    if passed == error_fraction.len() {
        RegimeLabel::FullGeneralization
    } else if passed > 0 {
        RegimeLabel::PartialGeneralization(passed)
    } else {
        RegimeLabel::PreLearning
    }
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}
