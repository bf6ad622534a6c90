//! Random Hierarchy Model grammars.
//!
//! An instance is a regular tree of depth `L` and branching factor `s`. Every
//! level above the leaves carries a vocabulary of `v` symbols, and each symbol
//! owns `m` productions (s-tuples of symbols one level down). Productions are
//! drawn without replacement, so no s-tuple is produced by two different
//! symbols and every string has a unique derivation.
//!
//! Layers are 0-based in this API: layer `l` rewrites a level-`(l + 1)` symbol
//! into `s` level-`l` symbols, level 0 being the visible tokens.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use num_bigint::BigUint;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A symbol at any level of the tree, in `[0, v)`.
pub type Symbol = u32;

const NO_RULE: u32 = u32::MAX;
const DENSE_INVERSE_LIMIT: u64 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GrammarParams {
    /// Vocabulary size at every level.
    pub vocab: usize,
    /// Productions (synonyms) per symbol.
    pub synonyms: usize,
    /// Tree depth `L`.
    pub depth: usize,
    /// Branching factor `s`.
    pub branching: usize,
    pub seed: u64,
}

impl GrammarParams {
    pub fn new(vocab: usize, synonyms: usize, depth: usize, branching: usize, seed: u64) -> Self {
        Self { vocab, synonyms, depth, branching, seed }
    }

    /// Sequence length `d = s^L`.
    pub fn dim(&self) -> usize {
        self.branching.pow(self.depth as u32)
    }

    /// Number of internal nodes, `(d - 1) / (s - 1)`.
    pub fn internal_nodes(&self) -> usize {
        (0..self.depth).map(|l| self.branching.pow(l as u32)).sum()
    }

    /// `v^s` if it fits in a `u64`.
    pub fn tuple_space(&self) -> Option<u64> {
        (self.vocab as u64).checked_pow(self.branching as u32)
    }

    /// Sample complexity for the rules at 1-based layer `layer`: `v m^(layer + 1)`.
    pub fn sample_complexity(&self, layer: usize) -> u128 {
        self.vocab as u128 * (self.synonyms as u128).pow(layer as u32 + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.synonyms == 0 || self.depth == 0 {
            return Err(Error::InvalidParams("v, m and L must be positive".into()));
        }
        if self.branching < 2 {
            return Err(Error::InvalidParams(format!(
                "branching factor must be at least 2, got {}",
                self.branching
            )));
        }
        if self.vocab > u32::MAX as usize / 2 {
            return Err(Error::InvalidParams("vocabulary too large".into()));
        }
        self.branching
            .checked_pow(self.depth as u32)
            .ok_or_else(|| Error::InvalidParams("s^L overflows".into()))?;
        let needed = self.synonyms as u128 * self.vocab as u128;
        if let Some(space) = self.tuple_space() {
            if needed > space as u128 {
                return Err(Error::Ambiguous {
                    needed: needed as u64,
                    available: space,
                });
            }
        }
        Ok(())
    }
}

/// The number of distinct strings generated by the grammar, `v m^((d-1)/(s-1))`.
pub fn count_total_data(params: &GrammarParams) -> BigUint {
    BigUint::from(params.vocab) * BigUint::from(params.synonyms).pow(params.internal_nodes() as u32)
}

/// Same as [`count_total_data`] when the count fits in a `u128`.
pub fn count_total_data_u128(params: &GrammarParams) -> Option<u128> {
    (params.synonyms as u128)
        .checked_pow(params.internal_nodes() as u32)
        .and_then(|c| c.checked_mul(params.vocab as u128))
}

#[derive(Debug, Clone)]
enum InverseTable {
    Dense(Vec<u32>),
    Sparse(HashMap<u64, u32>),
}

impl InverseTable {
    fn get(&self, code: u64) -> Option<u32> {
        match self {
            InverseTable::Dense(t) => t.get(code as usize).copied().filter(|&r| r != NO_RULE),
            InverseTable::Sparse(t) => t.get(&code).copied(),
        }
    }
}

/// A frozen RHM instance.
#[derive(Debug, Clone)]
pub struct Grammar {
    params: GrammarParams,
    /// `rules[l][(a * m + k) * s + c]` is child `c` of production `k` of symbol `a`.
    rules: Vec<Vec<Symbol>>,
    /// Maps the code of an s-tuple to its rule id `a * m + k`.
    inverse: Vec<InverseTable>,
}

/// A visible string of length `d`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<Symbol>);

impl TokenSequence {
    pub fn new(tokens: Vec<Symbol>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[Symbol] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<Symbol> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of positions where `self` and `other` differ.
    pub fn hamming(&self, other: &TokenSequence) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

impl From<Vec<Symbol>> for TokenSequence {
    fn from(v: Vec<Symbol>) -> Self {
        Self(v)
    }
}

impl std::ops::Index<usize> for TokenSequence {
    type Output = Symbol;
    fn index(&self, i: usize) -> &Symbol {
        &self.0[i]
    }
}

/// A full derivation: symbols at every level and the production chosen at
/// every internal node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentTree {
    /// `levels[0]` are the leaves, `levels[L]` holds the root.
    pub levels: Vec<Vec<Symbol>>,
    /// `choices[l][n]` is the production index used by node `n` of level `l + 1`.
    pub choices: Vec<Vec<u32>>,
}

impl LatentTree {
    pub fn leaves(&self) -> TokenSequence {
        TokenSequence(self.levels[0].clone())
    }
}

/// A set of distinct strings.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    items: Vec<TokenSequence>,
}

impl Dataset {
    /// Wraps `items`, rejecting duplicates.
    pub fn new(items: Vec<TokenSequence>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(items.len());
        for x in &items {
            if !seen.insert(x) {
                return Err(Error::DuplicateItem);
            }
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[TokenSequence] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TokenSequence> {
        self.items.iter()
    }

    pub fn to_set(&self) -> HashSet<TokenSequence> {
        self.items.iter().cloned().collect()
    }

    /// Newline-delimited, comma-separated integer rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for x in &self.items {
            let row: Vec<String> = x.tokens().iter().map(|t| t.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Reads the CSV form; every row must have `dim` tokens.
    pub fn read_csv<R: BufRead>(r: R, dim: usize) -> Result<Self> {
        let mut items = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let tokens = line
                .split(',')
                .map(|t| t.trim().parse::<Symbol>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            if tokens.len() != dim {
                return Err(Error::LengthMismatch { expected: dim, got: tokens.len() });
            }
            items.push(TokenSequence(tokens));
        }
        Self::new(items)
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a TokenSequence;
    type IntoIter = std::slice::Iter<'a, TokenSequence>;
    fn into_iter(self) -> Self::IntoIter {
        self.items.iter()
    }
}

#[derive(Serialize, Deserialize)]
struct GrammarDocument {
    format: String,
    version: u32,
    params: GrammarParams,
    /// `[layer][symbol][production][child]`
    rules: Vec<Vec<Vec<Vec<Symbol>>>>,
}

const GRAMMAR_FORMAT: &str = "rhm-grammar";
const GRAMMAR_VERSION: u32 = 1;

impl Grammar {
    /// Samples a grammar from `params.seed`.
    pub fn build(params: GrammarParams) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let (v, m, s) = (params.vocab, params.synonyms, params.branching);
        let mut rules = Vec::with_capacity(params.depth);
        for _ in 0..params.depth {
            let mut codes = sample_distinct_codes(&params, m * v, &mut rng);
            codes.shuffle(&mut rng);
            let mut table = vec![0; v * m * s];
            for (r, code) in codes.into_iter().enumerate() {
                decode_into(code, v, &mut table[r * s..(r + 1) * s]);
            }
            rules.push(table);
        }
        Self::from_tables(params, rules)
    }

    /// Builds a grammar from explicit flat rule tables laid out as
    /// `rules[l][(a * m + k) * s + c]`; rejects duplicated productions.
    pub fn from_tables(params: GrammarParams, rules: Vec<Vec<Symbol>>) -> Result<Self> {
        params.validate()?;
        let (v, m, s) = (params.vocab, params.synonyms, params.branching);
        if rules.len() != params.depth {
            return Err(Error::Format(format!("expected {} rule layers", params.depth)));
        }
        let dense = params.tuple_space().is_some_and(|n| n <= DENSE_INVERSE_LIMIT);
        let mut inverse = Vec::with_capacity(params.depth);
        for table in &rules {
            if table.len() != v * m * s {
                return Err(Error::Format("rule table has the wrong size".into()));
            }
            if table.iter().any(|&c| c as usize >= v) {
                return Err(Error::Format("rule symbol out of range".into()));
            }
            let mut inv = if dense {
                InverseTable::Dense(vec![NO_RULE; params.tuple_space().unwrap() as usize])
            } else {
                InverseTable::Sparse(HashMap::with_capacity(v * m))
            };
            for r in 0..v * m {
                let code = encode(&table[r * s..(r + 1) * s], v);
                let clash = match &mut inv {
                    InverseTable::Dense(t) => std::mem::replace(&mut t[code as usize], r as u32) != NO_RULE,
                    InverseTable::Sparse(t) => t.insert(code, r as u32).is_some(),
                };
                if clash {
                    return Err(Error::Format("productions are not distinct".into()));
                }
            }
            inverse.push(inv);
        }
        Ok(Self { params, rules, inverse })
    }

    pub fn params(&self) -> &GrammarParams {
        &self.params
    }

    pub fn vocab(&self) -> usize {
        self.params.vocab
    }

    pub fn synonyms(&self) -> usize {
        self.params.synonyms
    }

    pub fn depth(&self) -> usize {
        self.params.depth
    }

    pub fn branching(&self) -> usize {
        self.params.branching
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    /// Number of nodes at `level` (0 = leaves).
    pub fn level_width(&self, level: usize) -> usize {
        self.params.branching.pow((self.params.depth - level) as u32)
    }

    /// Children of production `k` of `symbol` at `layer`.
    pub fn production(&self, layer: usize, symbol: Symbol, k: usize) -> &[Symbol] {
        let (m, s) = (self.params.synonyms, self.params.branching);
        let r = symbol as usize * m + k;
        &self.rules[layer][r * s..(r + 1) * s]
    }

    /// All productions of `layer`, flat, indexed by rule id `a * m + k`.
    pub fn layer_rules(&self, layer: usize) -> &[Symbol] {
        &self.rules[layer]
    }

    /// Rule id (`a * m + k`) producing `children` at `layer`, if any.
    pub fn lookup(&self, layer: usize, children: &[Symbol]) -> Option<u32> {
        let v = self.params.vocab;
        if children.iter().any(|&c| c as usize >= v) {
            return None;
        }
        self.inverse[layer].get(encode(children, v))
    }

    /// Draws a full derivation: uniform root, uniform production at every node.
    pub fn sample_tree<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentTree {
        let (v, m, s, depth) = (
            self.params.vocab,
            self.params.synonyms,
            self.params.branching,
            self.params.depth,
        );
        let mut levels = vec![Vec::new(); depth + 1];
        let mut choices = vec![Vec::new(); depth];
        levels[depth] = vec![rng.random_range(0..v) as Symbol];
        for layer in (0..depth).rev() {
            let parents = std::mem::take(&mut levels[layer + 1]);
            let mut children = Vec::with_capacity(parents.len() * s);
            let mut picks = Vec::with_capacity(parents.len());
            for &a in &parents {
                let k = rng.random_range(0..m);
                picks.push(k as u32);
                children.extend_from_slice(self.production(layer, a, k));
            }
            levels[layer + 1] = parents;
            levels[layer] = children;
            choices[layer] = picks;
        }
        LatentTree { levels, choices }
    }

    pub fn sample_datum<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenSequence {
        self.sample_tree(rng).leaves()
    }

    /// `size` distinct valid strings by rejection of duplicates.
    pub fn sample_dataset<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Dataset> {
        self.sample_dataset_excluding(size, &HashSet::new(), rng)
    }

    /// Like [`Grammar::sample_dataset`], additionally avoiding every string in `exclude`.
    pub fn sample_dataset_excluding<R: Rng + ?Sized>(
        &self,
        size: usize,
        exclude: &HashSet<TokenSequence>,
        rng: &mut R,
    ) -> Result<Dataset> {
        let total = count_total_data(&self.params);
        let wanted = BigUint::from(size) + BigUint::from(exclude.len());
        if wanted > total {
            return Err(Error::NotEnoughData {
                requested: size,
                available: total.to_string(),
            });
        }
        let mut seen: HashSet<TokenSequence> = HashSet::with_capacity(size);
        let mut items = Vec::with_capacity(size);
        while items.len() < size {
            let x = self.sample_datum(rng);
            if exclude.contains(&x) || seen.contains(&x) {
                continue;
            }
            seen.insert(x.clone());
            items.push(x);
        }
        Ok(Dataset { items })
    }

    /// Every generable string, root symbols in ascending order. Refuses when
    /// there are more than `limit` strings.
    pub fn enumerate(&self, limit: usize) -> Result<Vec<TokenSequence>> {
        let count = count_total_data_u128(&self.params).filter(|&c| c <= limit as u128);
        if count.is_none() {
            return Err(Error::EnumerationTooLarge {
                count: count_total_data(&self.params).to_string(),
                limit,
            });
        }
        let mut out = Vec::new();
        for root in 0..self.params.vocab as Symbol {
            let mut partial = vec![vec![root]];
            for layer in (0..self.params.depth).rev() {
                partial = partial
                    .into_iter()
                    .flat_map(|symbols| self.expand_all(layer, &symbols))
                    .collect();
            }
            out.extend(partial.into_iter().map(TokenSequence));
        }
        Ok(out)
    }

    fn expand_all(&self, layer: usize, symbols: &[Symbol]) -> Vec<Vec<Symbol>> {
        let mut acc: Vec<Vec<Symbol>> = vec![Vec::new()];
        for &a in symbols {
            let mut next = Vec::with_capacity(acc.len() * self.params.synonyms);
            for prefix in &acc {
                for k in 0..self.params.synonyms {
                    let mut p = prefix.clone();
                    p.extend_from_slice(self.production(layer, a, k));
                    next.push(p);
                }
            }
            acc = next;
        }
        acc
    }

    fn check_tokens(&self, x: &TokenSequence) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::LengthMismatch { expected: self.dim(), got: x.len() });
        }
        if let Some(&t) = x.tokens().iter().find(|&&t| t as usize >= self.params.vocab) {
            return Err(Error::TokenOutOfRange { token: t, vocab: self.params.vocab });
        }
        Ok(())
    }

    /// Strict per-layer validity: entry `l` is true iff all s-blocks at level
    /// `l` are productions and every lower layer is valid too.
    pub fn validate_layers(&self, x: &TokenSequence) -> Vec<bool> {
        let mut out = vec![false; self.params.depth];
        if self.check_tokens(x).is_err() {
            return out;
        }
        let s = self.params.branching;
        let mut current = x.tokens().to_vec();
        for (layer, slot) in out.iter_mut().enumerate() {
            let mut next = Vec::with_capacity(current.len() / s);
            for block in current.chunks(s) {
                match self.lookup(layer, block) {
                    Some(r) => next.push(r / self.params.synonyms as u32),
                    None => return out,
                }
            }
            *slot = true;
            current = next;
        }
        out
    }

    /// Fraction of valid s-blocks at each layer. A block containing a symbol
    /// that could not be inferred from below counts as invalid.
    pub fn layer_validity_fractions(&self, x: &TokenSequence) -> Vec<f64> {
        let depth = self.params.depth;
        if self.check_tokens(x).is_err() {
            return vec![0.0; depth];
        }
        let s = self.params.branching;
        let mut current: Vec<Option<Symbol>> = x.tokens().iter().map(|&t| Some(t)).collect();
        let mut out = Vec::with_capacity(depth);
        let mut block = vec![0; s];
        for layer in 0..depth {
            let mut next = Vec::with_capacity(current.len() / s);
            let mut valid = 0usize;
            for chunk in current.chunks(s) {
                let parent = if chunk.iter().all(Option::is_some) {
                    for (b, c) in block.iter_mut().zip(chunk) {
                        *b = c.unwrap();
                    }
                    self.lookup(layer, &block).map(|r| r / self.params.synonyms as u32)
                } else {
                    None
                };
                valid += parent.is_some() as usize;
                next.push(parent);
            }
            out.push(valid as f64 / next.len() as f64);
            current = next;
        }
        out
    }

    /// Recovers the unique derivation of a fully valid string.
    pub fn parse(&self, x: &TokenSequence) -> Option<LatentTree> {
        self.check_tokens(x).ok()?;
        let (m, s, depth) = (self.params.synonyms as u32, self.params.branching, self.params.depth);
        let mut levels = vec![x.tokens().to_vec()];
        let mut choices = Vec::with_capacity(depth);
        for layer in 0..depth {
            let mut parents = Vec::new();
            let mut picks = Vec::new();
            for block in levels[layer].chunks(s) {
                let r = self.lookup(layer, block)?;
                parents.push(r / m);
                picks.push(r % m);
            }
            levels.push(parents);
            choices.push(picks);
        }
        Some(LatentTree { levels, choices })
    }

    pub fn to_json(&self) -> String {
        let (v, m, s) = (self.params.vocab, self.params.synonyms, self.params.branching);
        let rules = self
            .rules
            .iter()
            .map(|table| {
                (0..v)
                    .map(|a| (0..m).map(|k| table[(a * m + k) * s..(a * m + k + 1) * s].to_vec()).collect())
                    .collect()
            })
            .collect();
        let doc = GrammarDocument {
            format: GRAMMAR_FORMAT.into(),
            version: GRAMMAR_VERSION,
            params: self.params,
            rules,
        };
        serde_json::to_string_pretty(&doc).expect("grammar serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GrammarDocument = serde_json::from_str(text)?;
        if doc.format != GRAMMAR_FORMAT || doc.version != GRAMMAR_VERSION {
            return Err(Error::Format(format!(
                "unsupported grammar document {} v{}",
                doc.format, doc.version
            )));
        }
        let p = doc.params;
        let mut tables = Vec::with_capacity(doc.rules.len());
        for layer in doc.rules {
            if layer.len() != p.vocab || layer.iter().any(|prods| prods.len() != p.synonyms) {
                return Err(Error::Format("rule table shape does not match params".into()));
            }
            let mut flat = Vec::with_capacity(p.vocab * p.synonyms * p.branching);
            for prod in layer.into_iter().flatten() {
                if prod.len() != p.branching {
                    return Err(Error::Format("production arity does not match s".into()));
                }
                flat.extend(prod);
            }
            tables.push(flat);
        }
        Self::from_tables(p, tables)
    }
}

fn encode(children: &[Symbol], v: usize) -> u64 {
    children.iter().fold(0u64, |acc, &c| acc.wrapping_mul(v as u64).wrapping_add(c as u64))
}

fn decode_into(mut code: u64, v: usize, out: &mut [Symbol]) {
    for slot in out.iter_mut().rev() {
        *slot = (code % v as u64) as Symbol;
        code /= v as u64;
    }
}

/// `count` distinct tuple codes drawn uniformly from `[0, v^s)`.
fn sample_distinct_codes<R: Rng + ?Sized>(params: &GrammarParams, count: usize, rng: &mut R) -> Vec<u64> {
    match params.tuple_space() {
        Some(space) if space <= (1u64 << 40) => index::sample(rng, space as usize, count)
            .into_iter()
            .map(|c| c as u64)
            .collect(),
        _ => {
            // Astronomically large tuple space: collisions are vanishingly rare.
            let (v, s) = (params.vocab, params.branching);
            let mut seen = HashSet::with_capacity(count);
            let mut out = Vec::with_capacity(count);
            let mut tuple = vec![0; s];
            while out.len() < count {
                for t in tuple.iter_mut() {
                    *t = rng.random_range(0..v) as Symbol;
                }
                let code = encode(&tuple, v);
                if seen.insert(code) {
                    out.push(code);
                }
            }
            out
        }
    }
}
