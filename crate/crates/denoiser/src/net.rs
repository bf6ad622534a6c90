//! Denoising networks with explicit forward and backward passes.
//!
//! Activations are row-major `[batch][position][channel]`. A convolution with
//! filter and stride `s` is then a single matrix product on rows of `s * C`
//! values, and its transpose maps each row to `s` child rows.

use memlab_core::grammar::{GrammarParams, Symbol};
use memlab_core::noise::KernelKind;
use memlab_core::{Error, Result, X0Predictor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ops::{add_col_sums, gelu, gelu_grad, gemm, softmax_rows, time_features};
use crate::param::Param;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    TreeUnet,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Maximal-update: readout multiplier `1/fan_in`, hidden learning rates
    /// scaled by `base_width / channels`.
    Mup,
    /// Fan-in Gaussian init, unit multipliers and learning rates.
    Standard,
    /// NTK-style readout multiplier `1/sqrt(fan_in)`.
    Lazy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub arch: Arch,
    /// Number of data symbols `v` predicted per position.
    pub vocab: usize,
    /// Number of input states per position (`v`, or `v + 1` with a mask).
    pub input_states: usize,
    /// Sequence length `d`.
    pub dim: usize,
    pub branching: usize,
    /// Encoder depth; equals the grammar depth for the tree U-Net.
    pub depth: usize,
    pub channels: usize,
    /// Hidden layers of the MLP (ignored by the U-Net).
    pub mlp_layers: usize,
    pub time_dim: usize,
    /// Number of noise levels `T`, used to scale time features.
    pub horizon: usize,
    pub init: InitScheme,
    pub base_width: usize,
}

impl NetworkConfig {
    pub fn tree_unet(grammar: &GrammarParams, kind: KernelKind, horizon: usize, channels: usize) -> Self {
        Self {
            arch: Arch::TreeUnet,
            vocab: grammar.vocab,
            input_states: input_states(grammar.vocab, kind),
            dim: grammar.dim(),
            branching: grammar.branching,
            depth: grammar.depth,
            channels,
            mlp_layers: 2,
            time_dim: 32,
            horizon,
            init: InitScheme::Mup,
            base_width: 64,
        }
    }

    pub fn mlp(grammar: &GrammarParams, kind: KernelKind, horizon: usize, channels: usize) -> Self {
        Self { arch: Arch::Mlp, ..Self::tree_unet(grammar, kind, horizon, channels) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::ShapeMismatch(msg.into()));
        if self.vocab == 0 || self.channels == 0 || self.dim == 0 {
            return bad("vocabulary, width and length must be positive");
        }
        if self.input_states < self.vocab {
            return bad("fewer input states than symbols");
        }
        if self.time_dim % 2 != 0 {
            return bad("time feature dimension must be even");
        }
        match self.arch {
            Arch::TreeUnet => {
                if self.branching < 2 || self.depth == 0 {
                    return bad("tree U-Net needs branching >= 2 and depth >= 1");
                }
                if self.branching.checked_pow(self.depth as u32) != Some(self.dim) {
                    return bad("tree U-Net depth does not match the sequence length");
                }
            }
            Arch::Mlp => {
                if self.mlp_layers == 0 {
                    return bad("MLP needs at least one hidden layer");
                }
            }
        }
        Ok(())
    }
}

pub fn input_states(vocab: usize, kind: KernelKind) -> usize {
    match kind {
        KernelKind::Uniform => vocab,
        KernelKind::Absorbing => vocab + 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Role {
    /// One-hot gather with `active` nonzero inputs per row.
    Embedding { active: usize },
    Time,
    Hidden,
    Readout,
    Bias,
}

/// Indices into the parameter list for one block: weight, bias, time map.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Block {
    w: usize,
    b: usize,
    t: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Layout {
    Unet { emb: Block, enc: Vec<Block>, dec: Vec<Block>, out: Block },
    Mlp { layers: Vec<Block>, out: Block },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: Vec<Param>,
    layout: Layout,
}

/// Forward intermediates needed by the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Cache {
    batch: usize,
    tokens: Vec<Symbol>,
    phi: Vec<f64>,
    /// Pre-activations per block, in forward order.
    pre: Vec<Vec<f64>>,
    /// Post-activations per block, in forward order.
    act: Vec<Vec<f64>>,
    /// Inputs of decoder blocks (top block first) and the readout.
    concat: Vec<Vec<f64>>,
}

impl Network {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { config: &config, params: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) };
        let c = config.channels;
        let e = config.time_dim;
        let layout = match config.arch {
            Arch::TreeUnet => {
                let s = config.branching;
                let emb = b.block("emb", config.input_states, c, Role::Embedding { active: 1 }, false);
                let enc = (1..=config.depth)
                    .map(|l| b.block(&format!("enc{l}"), s * c, c, Role::Hidden, true))
                    .collect();
                let dec = (1..=config.depth)
                    .map(|l| {
                        let fan_in = if l == config.depth { c } else { 2 * c };
                        b.block(&format!("dec{l}"), fan_in, s * c, Role::Hidden, true)
                    })
                    .collect();
                let out = b.block("out", 2 * c, config.vocab, Role::Readout, false);
                let _ = e;
                Layout::Unet { emb, enc, dec, out }
            }
            Arch::Mlp => {
                let d = config.dim;
                let mut layers = vec![b.block(
                    "mlp1",
                    d * config.input_states,
                    c,
                    Role::Embedding { active: d },
                    true,
                )];
                for i in 2..=config.mlp_layers {
                    layers.push(b.block(&format!("mlp{i}"), c, c, Role::Hidden, true));
                }
                let out = b.block("out", c, d * config.vocab, Role::Readout, false);
                Layout::Mlp { layers, out }
            }
        };
        let params = b.params;
        Ok(Self { config, params, layout })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn check_input(&self, x_t: &[Symbol], t: &[usize]) -> Result<()> {
        let d = self.config.dim;
        if x_t.len() != t.len() * d {
            return Err(Error::ShapeMismatch(format!("{} tokens for {} sequences of {d}", x_t.len(), t.len())));
        }
        if let Some(&bad) = x_t.iter().find(|&&x| x as usize >= self.config.input_states) {
            return Err(Error::TokenOutOfRange { token: bad, vocab: self.config.input_states });
        }
        Ok(())
    }

    /// Logits, flat `batch * d * v`.
    pub fn forward(&self, x_t: &[Symbol], t: &[usize], cache: &mut Cache) -> Result<Vec<f64>> {
        self.check_input(x_t, t)?;
        let cfg = &self.config;
        cache.batch = t.len();
        cache.tokens.clear();
        cache.tokens.extend_from_slice(x_t);
        cache.phi = vec![0.0; t.len() * cfg.time_dim];
        for (row, &level) in cache.phi.chunks_mut(cfg.time_dim).zip(t) {
            time_features(level, cfg.horizon, cfg.time_dim, row);
        }
        cache.pre.clear();
        cache.act.clear();
        cache.concat.clear();
        Ok(match &self.layout {
            Layout::Unet { emb, enc, dec, out } => self.unet_forward(*emb, enc, dec, *out, cache),
            Layout::Mlp { layers, out } => self.mlp_forward(layers, *out, cache),
        })
    }

    /// Accumulates parameter gradients of `sum(dlogits * logits)`.
    pub fn backward(&mut self, cache: &Cache, dlogits: &[f64]) {
        match self.layout.clone() {
            Layout::Unet { emb, enc, dec, out } => self.unet_backward(emb, &enc, &dec, out, cache, dlogits),
            Layout::Mlp { layers, out } => self.mlp_backward(&layers, out, cache, dlogits),
        }
    }

    /// `pre = mult * input @ W + bias + time bias` over `rows` rows, with
    /// `rows / batch` rows per sample.
    fn affine(&self, blk: Block, input: &[f64], rows: usize, phi: &[f64], batch: usize) -> Vec<f64> {
        let w = &self.params[blk.w];
        let mut pre = vec![0.0; rows * w.cols];
        gemm(rows, w.rows, w.cols, w.mult, input, false, &w.value, false, 0.0, &mut pre);
        self.add_biases(blk, &mut pre, phi, batch);
        pre
    }

    /// Adds the bias and the per-sample time bias; the bias width may divide
    /// the row width (transposed convolutions emit several child rows).
    fn add_biases(&self, blk: Block, pre: &mut [f64], phi: &[f64], batch: usize) {
        let bias = &self.params[blk.b];
        let c = bias.cols;
        let mut tb = vec![0.0; batch * c];
        if blk.t != usize::MAX {
            let tm = &self.params[blk.t];
            gemm(batch, tm.rows, c, tm.mult, phi, false, &tm.value, false, 0.0, &mut tb);
        }
        let per_sample = pre.len() / batch;
        for (b, chunk) in pre.chunks_mut(per_sample).enumerate() {
            let tbr = &tb[b * c..(b + 1) * c];
            for row in chunk.chunks_mut(c) {
                for ((x, bb), tt) in row.iter_mut().zip(&bias.value).zip(tbr) {
                    *x += bb * bias.mult + tt;
                }
            }
        }
    }

    /// Gradients of `add_biases` given `dpre`.
    fn biases_backward(&mut self, blk: Block, dpre: &[f64], phi: &[f64], batch: usize) {
        let c = self.params[blk.b].cols;
        let mult_b = self.params[blk.b].mult;
        let per_sample = dpre.len() / batch;
        let mut sums = vec![0.0; batch * c];
        for (b, chunk) in dpre.chunks(per_sample).enumerate() {
            add_col_sums(chunk, c, &mut sums[b * c..(b + 1) * c]);
        }
        let gb = &mut self.params[blk.b].grad;
        for row in sums.chunks(c) {
            for (g, s) in gb.iter_mut().zip(row) {
                *g += mult_b * s;
            }
        }
        if blk.t != usize::MAX {
            let tm = &mut self.params[blk.t];
            gemm(tm.rows, batch, c, tm.mult, phi, true, &sums, false, 1.0, &mut tm.grad);
        }
    }

    fn gather_embedding(&self, blk: Block, tokens: &[Symbol], per_row: usize, rows: usize, phi: &[f64], batch: usize) -> Vec<f64> {
        let w = &self.params[blk.w];
        let c = w.cols;
        let states = self.config.input_states;
        let mut pre = vec![0.0; rows * c];
        for (r, out) in pre.chunks_mut(c).enumerate() {
            for (j, &tok) in tokens[r * per_row..(r + 1) * per_row].iter().enumerate() {
                let src = &w.value[(j * states + tok as usize) * c..(j * states + tok as usize + 1) * c];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += w.mult * s;
                }
            }
        }
        self.add_biases(blk, &mut pre, phi, batch);
        pre
    }

    fn gather_backward(&mut self, blk: Block, tokens: &[Symbol], per_row: usize, dpre: &[f64], phi: &[f64], batch: usize) {
        self.biases_backward(blk, dpre, phi, batch);
        let states = self.config.input_states;
        let w = &mut self.params[blk.w];
        let c = w.cols;
        for (r, g) in dpre.chunks(c).enumerate() {
            for (j, &tok) in tokens[r * per_row..(r + 1) * per_row].iter().enumerate() {
                let dst = &mut w.grad[(j * states + tok as usize) * c..(j * states + tok as usize + 1) * c];
                for (o, s) in dst.iter_mut().zip(g) {
                    *o += w.mult * s;
                }
            }
        }
    }

    /// `dinput = mult * dpre @ W^T` plus weight gradient `mult * input^T @ dpre`.
    fn dense_backward(&mut self, blk: Block, input: &[f64], rows: usize, dpre: &[f64], need_input: bool) -> Vec<f64> {
        let w = &mut self.params[blk.w];
        gemm(w.rows, rows, w.cols, w.mult, input, true, dpre, false, 1.0, &mut w.grad);
        let mut dinput = Vec::new();
        if need_input {
            dinput = vec![0.0; rows * w.rows];
            gemm(rows, w.cols, w.rows, w.mult, dpre, false, &w.value, true, 0.0, &mut dinput);
        }
        dinput
    }

    fn unet_forward(&self, emb: Block, enc: &[Block], dec: &[Block], out: Block, cache: &mut Cache) -> Vec<f64> {
        let cfg = &self.config;
        let (bsz, d, c, s, depth) = (cache.batch, cfg.dim, cfg.channels, cfg.branching, cfg.depth);
        let phi = std::mem::take(&mut cache.phi);
        // Embedding (block 0) and encoder blocks 1..=L.
        let pre0 = self.gather_embedding(emb, &cache.tokens, 1, bsz * d, &phi, bsz);
        let act0: Vec<f64> = pre0.iter().map(|&x| gelu(x)).collect();
        cache.pre.push(pre0);
        cache.act.push(act0);
        let mut width = d;
        for blk in enc {
            width /= s;
            let pre = self.affine(*blk, cache.act.last().unwrap(), bsz * width, &phi, bsz);
            cache.act.push(pre.iter().map(|&x| gelu(x)).collect());
            cache.pre.push(pre);
        }
        // Decoder blocks L..=1; the top one reads the encoder output directly.
        let mut up: Vec<f64> = cache.act[depth].clone();
        let mut width = 1;
        for l in (1..=depth).rev() {
            let input = if l == depth { up } else { concat_channels(&up, &cache.act[l], c) };
            let pre = self.affine(dec[l - 1], &input, bsz * width, &phi, bsz);
            width *= s;
            up = pre.iter().map(|&x| gelu(x)).collect();
            cache.concat.push(input);
            cache.pre.push(pre);
            cache.act.push(up.clone());
        }
        let z = concat_channels(&up, &cache.act[0], c);
        let logits = self.affine(out, &z, bsz * d, &phi, bsz);
        cache.concat.push(z);
        cache.phi = phi;
        logits
    }

    fn unet_backward(&mut self, emb: Block, enc: &[Block], dec: &[Block], out: Block, cache: &Cache, dlogits: &[f64]) {
        let cfg = self.config.clone();
        let (bsz, d, c, s, depth) = (cache.batch, cfg.dim, cfg.channels, cfg.branching, cfg.depth);
        let phi = &cache.phi;
        self.biases_backward(out, dlogits, phi, bsz);
        let z = cache.concat.last().unwrap();
        let dz = self.dense_backward(out, z, bsz * d, dlogits, true);
        let (mut dup, de0) = split_channels(&dz, c);
        // Encoder activation gradients, filled by the decoder skips first.
        let mut de: Vec<Vec<f64>> = cache.act[..=depth].iter().map(|a| vec![0.0; a.len()]).collect();
        add_into(&mut de[0], &de0);
        let mut width = d;
        for (i, l) in (1..=depth).enumerate() {
            // Decoder block `l` is the (depth - l)-th decoder entry in the cache.
            let k = depth - l;
            let pre = &cache.pre[depth + 1 + k];
            let dpre: Vec<f64> = dup.iter().zip(pre).map(|(g, &x)| g * gelu_grad(x)).collect();
            width /= s;
            self.biases_backward(dec[l - 1], &dpre, phi, bsz);
            let input = &cache.concat[k];
            let din = self.dense_backward(dec[l - 1], input, bsz * width, &dpre, true);
            if l == depth {
                add_into(&mut de[depth], &din);
                dup = Vec::new();
            } else {
                let (a, b) = split_channels(&din, c);
                add_into(&mut de[l], &b);
                dup = a;
            }
            let _ = i;
        }
        for l in (1..=depth).rev() {
            let pre = &cache.pre[l];
            let dpre: Vec<f64> = de[l].iter().zip(pre).map(|(g, &x)| g * gelu_grad(x)).collect();
            self.biases_backward(enc[l - 1], &dpre, phi, bsz);
            let rows = bsz * d / s.pow(l as u32);
            let din = self.dense_backward(enc[l - 1], &cache.act[l - 1], rows, &dpre, true);
            add_into(&mut de[l - 1], &din);
        }
        let dpre0: Vec<f64> = de[0].iter().zip(&cache.pre[0]).map(|(g, &x)| g * gelu_grad(x)).collect();
        self.gather_backward(emb, &cache.tokens, 1, &dpre0, phi, bsz);
    }

    fn mlp_forward(&self, layers: &[Block], out: Block, cache: &mut Cache) -> Vec<f64> {
        let bsz = cache.batch;
        let d = self.config.dim;
        let phi = std::mem::take(&mut cache.phi);
        let pre = self.gather_embedding(layers[0], &cache.tokens, d, bsz, &phi, bsz);
        cache.act.push(pre.iter().map(|&x| gelu(x)).collect());
        cache.pre.push(pre);
        for blk in &layers[1..] {
            let pre = self.affine(*blk, cache.act.last().unwrap(), bsz, &phi, bsz);
            cache.act.push(pre.iter().map(|&x| gelu(x)).collect());
            cache.pre.push(pre);
        }
        let logits = self.affine(out, cache.act.last().unwrap(), bsz, &phi, bsz);
        cache.phi = phi;
        logits
    }

    fn mlp_backward(&mut self, layers: &[Block], out: Block, cache: &Cache, dlogits: &[f64]) {
        let bsz = cache.batch;
        let d = self.config.dim;
        let phi = &cache.phi;
        self.biases_backward(out, dlogits, phi, bsz);
        let mut dact = self.dense_backward(out, cache.act.last().unwrap(), bsz, dlogits, true);
        for i in (0..layers.len()).rev() {
            let dpre: Vec<f64> = dact.iter().zip(&cache.pre[i]).map(|(g, &x)| g * gelu_grad(x)).collect();
            if i == 0 {
                self.gather_backward(layers[0], &cache.tokens, d, &dpre, phi, bsz);
            } else {
                self.biases_backward(layers[i], &dpre, phi, bsz);
                dact = self.dense_backward(layers[i], &cache.act[i - 1], bsz, &dpre, true);
            }
        }
    }

    /// Root-mean-square of each block's post-activations on a batch.
    pub fn activation_rms(&self, x_t: &[Symbol], t: &[usize]) -> Result<Vec<f64>> {
        let mut cache = Cache::default();
        let logits = self.forward(x_t, t, &mut cache)?;
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        let mut out: Vec<f64> = cache.act.iter().map(|a| rms(a)).collect();
        out.push(rms(&logits));
        Ok(out)
    }

    /// Softmax predictions, flat `batch * d * v`.
    pub fn predict(&self, x_t: &[Symbol], t: &[usize]) -> Result<Vec<f64>> {
        let mut cache = Cache::default();
        let mut p = self.forward(x_t, t, &mut cache)?;
        softmax_rows(&mut p, self.config.vocab);
        Ok(p)
    }
}

const PREDICT_CHUNK: usize = 512;

impl X0Predictor for Network {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn vocab(&self) -> usize {
        self.config.vocab
    }

    fn predict_x0(&self, x_t: &[Symbol], t: &[usize], out: &mut [f64]) -> Result<()> {
        let (d, v) = (self.config.dim, self.config.vocab);
        if out.len() != x_t.len() * v {
            return Err(Error::ShapeMismatch("output buffer size".into()));
        }
        for (i, tc) in t.chunks(PREDICT_CHUNK).enumerate() {
            let start = i * PREDICT_CHUNK;
            let p = self.predict(&x_t[start * d..(start + tc.len()) * d], tc)?;
            out[start * d * v..(start + tc.len()) * d * v].copy_from_slice(&p);
        }
        Ok(())
    }
}

fn concat_channels(a: &[f64], b: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.chunks(c).zip(b.chunks(c)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    out
}

fn split_channels(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = Vec::with_capacity(x.len() / 2);
    let mut b = Vec::with_capacity(x.len() / 2);
    for row in x.chunks(2 * c) {
        a.extend_from_slice(&row[..c]);
        b.extend_from_slice(&row[c..]);
    }
    (a, b)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

struct Builder<'a> {
    config: &'a NetworkConfig,
    params: Vec<Param>,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn push(&mut self, name: String, rows: usize, cols: usize, role: Role) -> usize {
        let cfg = self.config;
        let mut p = Param::zeros(name, rows, cols);
        let width_scale = cfg.base_width as f64 / cfg.channels as f64;
        let (std, mult, lr) = match (role, cfg.init) {
            (Role::Bias, _) => (0.0, 1.0, 1.0),
            (Role::Embedding { active }, _) => (1.0 / (active as f64).sqrt(), 1.0, 1.0),
            (Role::Time, _) => (1.0 / (rows as f64).sqrt(), 1.0, 1.0),
            (Role::Hidden, InitScheme::Mup) => (1.0 / (rows as f64).sqrt(), 1.0, width_scale),
            (Role::Hidden, _) => (1.0 / (rows as f64).sqrt(), 1.0, 1.0),
            (Role::Readout, InitScheme::Mup) => (1.0, 1.0 / rows as f64, 1.0),
            (Role::Readout, InitScheme::Standard) => (1.0 / (rows as f64).sqrt(), 1.0, 1.0),
            (Role::Readout, InitScheme::Lazy) => (1.0, 1.0 / (rows as f64).sqrt(), 1.0),
        };
        if std > 0.0 {
            for w in &mut p.value {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                *w = std * z;
            }
        }
        p.mult = mult;
        p.lr_scale = lr;
        self.params.push(p);
        self.params.len() - 1
    }

    fn block(&mut self, name: &str, fan_in: usize, fan_out: usize, role: Role, timed: bool) -> Block {
        let w = self.push(format!("{name}.w"), fan_in, fan_out, role);
        // Transposed convolutions share one bias over the `s` emitted children.
        let channels = if role == Role::Hidden && fan_out != self.config.channels {
            self.config.channels
        } else {
            fan_out
        };
        let b = self.push(format!("{name}.b"), 1, channels, Role::Bias);
        let t = if timed {
            self.push(format!("{name}.t"), self.config.time_dim, channels, Role::Time)
        } else {
            usize::MAX
        };
        Block { w, b, t }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small(arch: Arch, init: InitScheme, channels: usize) -> Network {
        let g = GrammarParams::new(3, 2, 2, 2, 0);
        let mut cfg = match arch {
            Arch::TreeUnet => NetworkConfig::tree_unet(&g, KernelKind::Uniform, 10, channels),
            Arch::Mlp => NetworkConfig::mlp(&g, KernelKind::Uniform, 10, channels),
        };
        cfg.init = init;
        cfg.time_dim = 4;
        Network::new(cfg, 7).unwrap()
    }

    #[test]
    fn output_shape() {
        for arch in [Arch::TreeUnet, Arch::Mlp] {
            let net = small(arch, InitScheme::Mup, 8);
            let mut cache = Cache::default();
            let logits = net.forward(&[0, 1, 2, 0, 2, 2, 1, 0], &[3, 9], &mut cache).unwrap();
            assert_eq!(logits.len(), 2 * 4 * 3);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = small(Arch::TreeUnet, InitScheme::Mup, 8);
        let mut cache = Cache::default();
        assert!(net.forward(&[0, 1, 2], &[1], &mut cache).is_err());
        assert!(net.forward(&[0, 1, 2, 3], &[1], &mut cache).is_err());
        let g = GrammarParams::new(3, 2, 2, 2, 0);
        let mut cfg = NetworkConfig::tree_unet(&g, KernelKind::Uniform, 10, 8);
        cfg.dim = 6;
        assert!(Network::new(cfg, 0).is_err());
    }

    #[test]
    fn batch_permutation_commutes() {
        let net = small(Arch::TreeUnet, InitScheme::Standard, 8);
        let x = [0, 1, 2, 0];
        let y = [2, 2, 1, 0];
        let mut c = Cache::default();
        let a = net.forward(&x.iter().chain(&y).copied().collect::<Vec<_>>(), &[3, 9], &mut c).unwrap();
        let b = net.forward(&y.iter().chain(&x).copied().collect::<Vec<_>>(), &[9, 3], &mut c).unwrap();
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&a[..12], &b[12..]));
        assert!(close(&a[12..], &b[..12]));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = small(Arch::TreeUnet, InitScheme::Mup, 8);
        let b = small(Arch::TreeUnet, InitScheme::Mup, 8);
        assert_eq!(a.params, b.params);
    }
}
