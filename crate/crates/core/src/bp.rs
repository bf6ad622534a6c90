//! Exact sum-product inference on the RHM derivation tree.
//!
//! Messages are stored per level as flat `width * v` buffers. Every message is
//! rescaled to sum to one and the log of the discarded factor is accumulated
//! into the log-partition.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grammar::{Grammar, Symbol, TokenSequence};
use crate::noise::{KernelKind, TransitionKernel};

/// Per-leaf likelihoods `e_k(a) = q(x_t[k] | x_0[k] = a)`, flat `d * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafEvidence {
    vocab: usize,
    rows: Vec<f64>,
}

impl LeafEvidence {
    pub fn from_rows(vocab: usize, rows: Vec<f64>) -> Result<Self> {
        if vocab == 0 || rows.len() % vocab != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} evidence entries do not split into rows of {vocab}",
                rows.len()
            )));
        }
        if rows.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::InvalidArgument("evidence must be finite and nonnegative".into()));
        }
        if rows.chunks(vocab).any(|r| r.iter().all(|&e| e == 0.0)) {
            return Err(Error::ImpossibleEvidence);
        }
        Ok(Self { vocab, rows })
    }

    pub fn uninformative(dim: usize, vocab: usize) -> Self {
        Self { vocab, rows: vec![1.0; dim * vocab] }
    }

    /// Evidence that pins every leaf to the given token.
    pub fn one_hot(x: &TokenSequence, vocab: usize) -> Result<Self> {
        let mut rows = vec![0.0; x.len() * vocab];
        for (k, &t) in x.tokens().iter().enumerate() {
            if t as usize >= vocab {
                return Err(Error::TokenOutOfRange { token: t, vocab });
            }
            rows[k * vocab + t as usize] = 1.0;
        }
        Ok(Self { vocab, rows })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.rows.len() / self.vocab
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.rows[k * self.vocab..(k + 1) * self.vocab]
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }
}

/// Evidence induced by observing `x_t` through a cumulative kernel. Tokens of
/// `x_t` may include the mask index `v` for absorbing kernels.
pub fn leaf_evidence(x_t: &[Symbol], kernel: &TransitionKernel) -> Result<LeafEvidence> {
    let v = kernel.vocab;
    let mut rows = vec![0.0; x_t.len() * v];
    leaf_evidence_into(x_t, kernel, &mut rows)?;
    LeafEvidence::from_rows(v, rows)
}

fn leaf_evidence_into(x_t: &[Symbol], kernel: &TransitionKernel, rows: &mut [f64]) -> Result<()> {
    let v = kernel.vocab;
    for (k, &obs) in x_t.iter().enumerate() {
        if obs as usize >= kernel.num_states() {
            return Err(Error::TokenOutOfRange { token: obs, vocab: kernel.num_states() });
        }
        let row = &mut rows[k * v..(k + 1) * v];
        for (a, e) in row.iter_mut().enumerate() {
            *e = kernel.prob(a as Symbol, obs);
        }
    }
    Ok(())
}

/// Result of a full upward/downward sweep.
#[derive(Debug, Clone)]
pub struct BeliefState {
    pub vocab: usize,
    /// `upward[l]` holds the normalized inside messages of level `l`
    /// (`l = 0` are the leaves, i.e. the normalized evidence).
    pub upward: Vec<Vec<f64>>,
    /// `downward[l]` holds the normalized outside messages of level `l`.
    pub downward: Vec<Vec<f64>>,
    /// Posterior marginals of the visible tokens, flat `d * v`.
    pub leaf_marginals: Vec<f64>,
    /// `ln sum_x p(x) prod_k e_k(x_k)`.
    pub log_partition: f64,
}

impl BeliefState {
    pub fn leaf(&self, k: usize) -> &[f64] {
        &self.leaf_marginals[k * self.vocab..(k + 1) * self.vocab]
    }

    /// Posterior marginals of the symbols at `level`, flat `width * v`.
    pub fn node_marginals(&self, level: usize) -> Vec<f64> {
        let mut out: Vec<f64> = self.upward[level]
            .iter()
            .zip(&self.downward[level])
            .map(|(a, b)| a * b)
            .collect();
        for row in out.chunks_mut(self.vocab) {
            normalize(row);
        }
        out
    }
}

fn normalize(row: &mut [f64]) -> f64 {
    let total: f64 = row.iter().sum();
    if total > 0.0 {
        row.iter_mut().for_each(|x| *x /= total);
    }
    total
}

fn check_shape(grammar: &Grammar, evidence: &LeafEvidence) -> Result<()> {
    if evidence.vocab != grammar.vocab() || evidence.dim() != grammar.dim() {
        return Err(Error::ShapeMismatch(format!(
            "evidence is {}x{}, grammar needs {}x{}",
            evidence.dim(),
            evidence.vocab,
            grammar.dim(),
            grammar.vocab()
        )));
    }
    Ok(())
}

/// Inside pass. Returns normalized messages per level and the accumulated
/// log-scale, which excludes the root prior and the `1/m` rule weights.
fn upward_pass(grammar: &Grammar, evidence: &LeafEvidence) -> Result<(Vec<Vec<f64>>, f64)> {
    check_shape(grammar, evidence)?;
    let (v, m, s) = (grammar.vocab(), grammar.synonyms(), grammar.branching());
    let mut log_scale = 0.0;
    let mut leaves = evidence.rows.clone();
    for row in leaves.chunks_mut(v) {
        let z = normalize(row);
        if !(z > 0.0) {
            return Err(Error::ImpossibleEvidence);
        }
        log_scale += z.ln();
    }
    let mut levels = vec![leaves];
    for layer in 0..grammar.depth() {
        let below = &levels[layer];
        let width = grammar.level_width(layer + 1);
        let mut msgs = vec![0.0; width * v];
        for n in 0..width {
            let out = &mut msgs[n * v..(n + 1) * v];
            for (a, slot) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for k in 0..m {
                    let prod = grammar.production(layer, a as Symbol, k);
                    let mut p = 1.0;
                    for (c, &sym) in prod.iter().enumerate() {
                        p *= below[(n * s + c) * v + sym as usize];
                    }
                    acc += p;
                }
                *slot = acc;
            }
            let z = normalize(out);
            if !(z > 0.0) {
                return Err(Error::ImpossibleEvidence);
            }
            log_scale += z.ln();
        }
        levels.push(msgs);
    }
    Ok((levels, log_scale))
}

/// Exact marginals of every node given leaf evidence, with a uniform root prior.
pub fn run_bp(grammar: &Grammar, evidence: &LeafEvidence) -> Result<BeliefState> {
    let (v, m, s, depth) = (grammar.vocab(), grammar.synonyms(), grammar.branching(), grammar.depth());
    let (upward, log_scale) = upward_pass(grammar, evidence)?;
    let root_mass: f64 = upward[depth].iter().sum::<f64>() / v as f64;
    let internal = grammar.params().internal_nodes() as f64;
    let log_partition = log_scale + root_mass.ln() - internal * (m as f64).ln();

    let mut downward = vec![Vec::new(); depth + 1];
    downward[depth] = vec![1.0 / v as f64; v];
    let mut others = vec![0.0; s];
    for layer in (0..depth).rev() {
        let parents = &downward[layer + 1];
        let below = &upward[layer];
        let width = grammar.level_width(layer);
        let mut msgs = vec![0.0; width * v];
        for n in 0..grammar.level_width(layer + 1) {
            for a in 0..v {
                let outside = parents[n * v + a];
                if outside == 0.0 {
                    continue;
                }
                for k in 0..m {
                    let prod = grammar.production(layer, a as Symbol, k);
                    // Product of the other children's inside messages, for each child.
                    let mut prefix = 1.0;
                    for (c, &sym) in prod.iter().enumerate() {
                        others[c] = prefix;
                        prefix *= below[(n * s + c) * v + sym as usize];
                    }
                    let mut suffix = 1.0;
                    for (c, &sym) in prod.iter().enumerate().rev() {
                        others[c] *= suffix;
                        suffix *= below[(n * s + c) * v + sym as usize];
                    }
                    for (c, &sym) in prod.iter().enumerate() {
                        msgs[(n * s + c) * v + sym as usize] += outside * others[c];
                    }
                }
            }
        }
        for row in msgs.chunks_mut(v) {
            normalize(row);
        }
        downward[layer] = msgs;
    }

    let mut leaf_marginals: Vec<f64> = upward[0].iter().zip(&downward[0]).map(|(a, b)| a * b).collect();
    for row in leaf_marginals.chunks_mut(v) {
        if !(normalize(row) > 0.0) {
            return Err(Error::ImpossibleEvidence);
        }
    }
    Ok(BeliefState { vocab: v, upward, downward, leaf_marginals, log_partition })
}

/// Leaf marginals by explicit enumeration of every string. Refuses grammars
/// with more than `limit` strings.
pub fn brute_force_marginals(grammar: &Grammar, evidence: &LeafEvidence, limit: usize) -> Result<Vec<f64>> {
    check_shape(grammar, evidence)?;
    let strings = grammar.enumerate(limit)?;
    let v = grammar.vocab();
    let mut out = vec![0.0; grammar.dim() * v];
    // Derivations are unique and rule choices uniform, so the prior is uniform.
    for x in &strings {
        let w: f64 = x
            .tokens()
            .iter()
            .enumerate()
            .map(|(k, &t)| evidence.row(k)[t as usize])
            .product();
        for (k, &t) in x.tokens().iter().enumerate() {
            out[k * v + t as usize] += w;
        }
    }
    let total: f64 = out[..v].iter().sum();
    if !(total > 0.0) {
        return Err(Error::ImpossibleEvidence);
    }
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Draws `x_0` from its exact posterior: root from prior times inside message,
/// then each production in proportion to the product of its children's inside
/// messages.
pub fn posterior_sample<R: Rng + ?Sized>(grammar: &Grammar, evidence: &LeafEvidence, rng: &mut R) -> Result<TokenSequence> {
    let (upward, _) = upward_pass(grammar, evidence)?;
    Ok(sample_from_upward(grammar, &upward, rng))
}

/// Draws `n` posterior samples sharing one inside pass.
pub fn posterior_samples<R: Rng + ?Sized>(
    grammar: &Grammar,
    evidence: &LeafEvidence,
    n: usize,
    rng: &mut R,
) -> Result<Vec<TokenSequence>> {
    let (upward, _) = upward_pass(grammar, evidence)?;
    Ok((0..n).map(|_| sample_from_upward(grammar, &upward, rng)).collect())
}

fn sample_from_upward<R: Rng + ?Sized>(grammar: &Grammar, upward: &[Vec<f64>], rng: &mut R) -> TokenSequence {
    let (v, m, s, depth) = (grammar.vocab(), grammar.synonyms(), grammar.branching(), grammar.depth());
    let mut current = vec![categorical(&upward[depth], rng) as Symbol];
    let mut weights = vec![0.0; m];
    for layer in (0..depth).rev() {
        let below = &upward[layer];
        let mut next = Vec::with_capacity(current.len() * s);
        for (n, &a) in current.iter().enumerate() {
            for (k, w) in weights.iter_mut().enumerate() {
                *w = grammar
                    .production(layer, a, k)
                    .iter()
                    .enumerate()
                    .map(|(c, &sym)| below[(n * s + c) * v + sym as usize])
                    .product();
            }
            let k = categorical(&weights, rng);
            next.extend_from_slice(grammar.production(layer, a, k));
        }
        current = next;
    }
    TokenSequence::new(current)
}

/// Index drawn with probability proportional to `weights`.
pub fn categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // Rounding fallthrough: last index with positive weight.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

const INCONSISTENT_FLOOR: f64 = 1e-9;

/// Exact `E[x_0 | x_t]` for a batch, written as flat `batch * d * v` rows.
/// Evidence that no string of the grammar can explain is softened by a small
/// uniform floor.
pub fn exact_x0_marginals(
    grammar: &Grammar,
    kind: KernelKind,
    alpha_bar: &[f64],
    x_t: &[Symbol],
    out: &mut [f64],
) -> Result<()> {
    let (d, v) = (grammar.dim(), grammar.vocab());
    if x_t.len() != alpha_bar.len() * d || out.len() != x_t.len() * v {
        return Err(Error::ShapeMismatch("batch shapes disagree".into()));
    }
    let mut rows = vec![0.0; d * v];
    for (b, &keep) in alpha_bar.iter().enumerate() {
        let kernel = TransitionKernel::new(kind, v, keep)?;
        leaf_evidence_into(&x_t[b * d..(b + 1) * d], &kernel, &mut rows)?;
        let evidence = LeafEvidence::from_rows(v, rows.clone())?;
        let state = match run_bp(grammar, &evidence) {
            // Factorized reverse steps can unmask mutually inconsistent
            // tokens; soften the evidence so the sampler can continue.
            Err(Error::ImpossibleEvidence) => {
                let soft: Vec<f64> = rows.iter().map(|&r| r + INCONSISTENT_FLOOR).collect();
                run_bp(grammar, &LeafEvidence::from_rows(v, soft)?)?
            }
            other => other?,
        };
        out[b * d * v..(b + 1) * d * v].copy_from_slice(&state.leaf_marginals);
    }
    Ok(())
}
