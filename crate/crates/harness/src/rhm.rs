//! Denoiser training on the Random Hierarchy Model with per-checkpoint
//! generation and metrics, the twin-model experiment and the phase diagram.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use memlab_core::grammar::{count_total_data_u128, Dataset, Grammar};
use memlab_core::metrics::{
    classify_regime, copy_fraction, error_fraction_per_layer, mean_nn_hamming, model_distance, Checkpoint, ErrorMode,
    ProbeSet, RegimeLabel, RegimeThresholds, TrainTrace,
};
use memlab_core::noise::NoiseSchedule;
use memlab_core::{Error, Result};
use memlab_denoiser::checkpoint;
use memlab_denoiser::train::{evaluate, NoisyBatch};
use memlab_denoiser::{generate, Network, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{checkpoint_schedule, RunConfig};
use crate::output::{checkpoint_path, csv_error, prepare_dir, write_json, TraceWriter};

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Validation size: the configured value, capped at half of the strings not
/// used for training.
pub fn effective_val_size(cfg: &RunConfig, taken: usize) -> usize {
    match count_total_data_u128(&cfg.grammar_params()) {
        Some(total) => {
            let free = total.saturating_sub(taken as u128) / 2;
            cfg.data.val_size.min(free.min(usize::MAX as u128) as usize)
        }
        None => cfg.data.val_size,
    }
}

/// Everything fixed before training starts.
struct Setup {
    grammar: Grammar,
    schedule: NoiseSchedule,
    train: Dataset,
    train_eval: NoisyBatch,
    val_eval: NoisyBatch,
}

fn noisy_eval(items: &Dataset, draws: usize, state: &TrainState, rng: &mut ChaCha8Rng) -> NoisyBatch {
    NoisyBatch::sample(items.iter().cycle().take(items.len() * draws.max(1)), state.kernels(), rng)
}

/// The per-run model plus its metric bookkeeping.
struct Learner {
    state: TrainState,
    trace: TrainTrace,
    writer: Option<TraceWriter>,
    prefix: String,
    stopped: bool,
    after_tau: usize,
}

impl Learner {
    fn checkpoint(&mut self, cfg: &RunConfig, setup: &Setup, index: usize, started: &Instant, dir: Option<&Path>) -> Result<()> {
        let net = &self.state.net;
        let lc = cfg.train_config().loss;
        let train_loss = evaluate(net, cfg.noise.kind, &setup.schedule, &lc, &setup.train_eval)?.total;
        let val_loss = evaluate(net, cfg.noise.kind, &setup.schedule, &lc, &setup.val_eval)?.total;
        let (copy, nn, errors, blocks) = if cfg.eval.n_gen == 0 {
            (f64::NAN, f64::NAN, Vec::new(), Vec::new())
        } else {
            let mut rng = stream(cfg.seeds.generation, index as u64);
            let samples = generate(net, cfg.noise.kind, &setup.schedule, cfg.eval.n_gen, cfg.eval.gen_jumps, &mut rng)?;
            (
                copy_fraction(&samples, &setup.train, cfg.eval.copy_threshold)?,
                mean_nn_hamming(&samples, &setup.train)?,
                error_fraction_per_layer(&setup.grammar, &samples, ErrorMode::Strict),
                error_fraction_per_layer(&setup.grammar, &samples, ErrorMode::Fractional),
            )
        };
        let c = Checkpoint {
            tau: self.state.tau,
            train_loss,
            val_loss,
            copy_fraction: copy,
            mean_nn_hamming: nn,
            error_fraction: errors,
            block_error_fraction: blocks,
            timestamp: cfg.eval.record_timestamps.then(|| started.elapsed().as_secs_f64()),
        };
        if let Some(w) = &mut self.writer {
            w.push(&c)?;
        }
        if let (Some(dir), true) = (dir, cfg.eval.save_checkpoints) {
            let path = checkpoint_path(dir, &self.prefix, c.tau);
            fs::create_dir_all(path.parent().unwrap())?;
            checkpoint::save(&self.state.net, c.tau, fs::File::create(path)?)?;
        }
        self.trace.push(c)?;
        if self.trace.tau_mem.is_none() {
            self.trace.tau_mem = self.trace.detect_tau_mem(cfg.eval.delta, cfg.eval.patience);
        } else {
            self.after_tau += 1;
        }
        let stop = cfg.train.stop_after_tau_mem;
        self.stopped = stop > 0 && self.trace.tau_mem.is_some() && self.after_tau >= stop;
        Ok(())
    }

    fn advance(&mut self, data: &Dataset, to: u64) -> Result<()> {
        while self.state.tau < to {
            self.state.train_step(data.items())?;
        }
        Ok(())
    }
}

fn build_setup(cfg: &RunConfig, train: Dataset, val: &Dataset, state: &TrainState) -> Result<Setup> {
    let grammar = Grammar::build(cfg.grammar_params())?;
    let schedule = NoiseSchedule::build(cfg.noise.schedule, cfg.noise.steps)?;
    let mut rng = stream(cfg.seeds.diffusion, 1);
    let train_eval = noisy_eval(&train, cfg.data.eval_draws, state, &mut rng);
    let val_eval = noisy_eval(val, cfg.data.eval_draws, state, &mut rng);
    Ok(Setup { grammar, schedule, train, train_eval, val_eval })
}

fn new_learner(cfg: &RunConfig, init: u64, diffusion: u64, dir: Option<&Path>, prefix: &str) -> Result<Learner> {
    let net = Network::new(cfg.network_config(), init)?;
    let schedule = NoiseSchedule::build(cfg.noise.schedule, cfg.noise.steps)?;
    let state = TrainState::new(net, cfg.noise.kind, schedule, cfg.train_config(), diffusion)?;
    let writer = match dir {
        Some(d) => Some(TraceWriter::create(d, prefix, &cfg.hash()?)?),
        None => None,
    };
    Ok(Learner { state, trace: TrainTrace::default(), writer, prefix: prefix.into(), stopped: false, after_tau: 0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub train_size: usize,
    pub val_size: usize,
    pub parameters: usize,
    pub tau_mem: Option<u64>,
    pub copy_onset: Option<u64>,
    pub steps_run: u64,
    pub diverged: Option<String>,
}

/// Trains one denoiser. With an output directory, writes `config.toml`,
/// `trace.jsonl`, `metrics.csv`, `summary.json` and optionally
/// `checkpoints/`. A divergence is returned as an error after the partial
/// trace is on disk.
pub fn run_rhm_training(cfg: &RunConfig, dir: Option<&Path>) -> Result<TrainTrace> {
    cfg.validate()?;
    if let Some(d) = dir {
        prepare_dir(d, cfg)?;
    }
    let grammar = Grammar::build(cfg.grammar_params())?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.data);
    let train = grammar.sample_dataset(cfg.data.train_size, &mut data_rng)?;
    let val = grammar.sample_dataset_excluding(effective_val_size(cfg, train.len()), &train.to_set(), &mut data_rng)?;
    let mut learner = new_learner(cfg, cfg.seeds.init, cfg.seeds.diffusion, dir, "")?;
    let setup = build_setup(cfg, train, &val, &learner.state)?;
    let started = Instant::now();
    let mut diverged = None;
    for (i, &tau) in checkpoint_schedule(cfg.train.first_checkpoint, cfg.train.max_steps, cfg.train.checkpoints_per_decade)
        .iter()
        .enumerate()
    {
        if let Err(e) = learner.advance(&setup.train, tau) {
            diverged = Some(e);
            break;
        }
        learner.checkpoint(cfg, &setup, i, &started, dir)?;
        if learner.stopped {
            break;
        }
    }
    if let Some(d) = dir {
        let summary = RunSummary {
            config_hash: cfg.hash()?,
            train_size: setup.train.len(),
            val_size: val.len(),
            parameters: learner.state.net.num_parameters(),
            tau_mem: learner.trace.tau_mem,
            copy_onset: learner.trace.detect_copy_onset(memlab_core::metrics::DEFAULT_COPY_ONSET),
            steps_run: learner.state.tau,
            diverged: diverged.as_ref().map(|e| e.to_string()),
        };
        write_json(&d.join("summary.json"), &summary)?;
    }
    match diverged {
        Some(e) => Err(e),
        None => Ok(learner.trace),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinResult {
    pub trace_a: TrainTrace,
    pub trace_b: TrainTrace,
    /// `(tau, model distance)` at every shared checkpoint.
    pub distance: Vec<(u64, f64)>,
}

impl TwinResult {
    /// Mean distance strictly before both memorization times and strictly
    /// after both. `None` when either side is empty or a time is missing.
    pub fn before_after(&self) -> Option<(f64, f64)> {
        let (a, b) = (self.trace_a.tau_mem?, self.trace_b.tau_mem?);
        let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        let before = mean(self.distance.iter().filter(|(t, _)| *t < a.min(b)).map(|p| p.1).collect())?;
        let after = mean(self.distance.iter().filter(|(t, _)| *t > a.max(b)).map(|p| p.1).collect())?;
        Some((before, after))
    }
}

/// Two models on disjoint training sets from one grammar, trained in
/// lockstep and compared on shared probe trajectories. With `identical`
/// both models see the first dataset, as a control.
pub fn run_twin_experiment(cfg: &RunConfig, identical: bool, dir: Option<&Path>) -> Result<TwinResult> {
    cfg.validate()?;
    let p = cfg.data.train_size;
    if let Some(total) = count_total_data_u128(&cfg.grammar_params()) {
        if (2 * p) as u128 > total {
            return Err(Error::NotEnoughData { requested: 2 * p, available: total.to_string() });
        }
    }
    if let Some(d) = dir {
        prepare_dir(d, cfg)?;
    }
    let grammar = Grammar::build(cfg.grammar_params())?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.data);
    let both = grammar.sample_dataset(2 * p, &mut data_rng)?;
    let set_a = Dataset::new(both.items()[..p].to_vec())?;
    let set_b = if identical { set_a.clone() } else { Dataset::new(both.items()[p..].to_vec())? };
    let taken: HashSet<_> = both.to_set();
    let val = grammar.sample_dataset_excluding(effective_val_size(cfg, taken.len()), &taken, &mut data_rng)?;

    let mut init = ChaCha8Rng::seed_from_u64(cfg.seeds.init);
    let mut diff = ChaCha8Rng::seed_from_u64(cfg.seeds.diffusion);
    let mut a = new_learner(cfg, init.random(), diff.random(), dir, "a_")?;
    let mut b = new_learner(cfg, init.random(), diff.random(), dir, "b_")?;
    let setup_a = build_setup(cfg, set_a, &val, &a.state)?;
    let setup_b = build_setup(cfg, set_b, &val, &b.state)?;

    // Probes come from strings neither model trains on.
    let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.probe);
    let mut excluded = taken;
    excluded.extend(val.iter().cloned());
    let probe_size = match count_total_data_u128(&cfg.grammar_params()) {
        Some(total) => cfg.data.probe_size.min(total.saturating_sub(excluded.len() as u128) as usize),
        None => cfg.data.probe_size,
    };
    let probe_data = grammar.sample_dataset_excluding(probe_size, &excluded, &mut probe_rng)?;
    let probes = ProbeSet::from_data(probe_data.items(), grammar.vocab(), cfg.noise.kind, &setup_a.schedule, &mut probe_rng)?;

    let mut distance = Vec::new();
    let mut dist_csv = match dir {
        Some(d) => {
            let mut w = csv::Writer::from_path(d.join("distance.csv")).map_err(csv_error)?;
            w.write_record(["config_hash", "tau", "model_distance"]).map_err(csv_error)?;
            Some(w)
        }
        None => None,
    };
    let hash = cfg.hash()?;
    let started = Instant::now();
    for (i, &tau) in checkpoint_schedule(cfg.train.first_checkpoint, cfg.train.max_steps, cfg.train.checkpoints_per_decade)
        .iter()
        .enumerate()
    {
        a.advance(&setup_a.train, tau)?;
        b.advance(&setup_b.train, tau)?;
        a.checkpoint(cfg, &setup_a, i, &started, dir)?;
        b.checkpoint(cfg, &setup_b, i, &started, dir)?;
        let dist = model_distance(&a.state.net, &b.state.net, &probes)?;
        distance.push((tau, dist));
        if let Some(w) = &mut dist_csv {
            w.write_record([hash.clone(), tau.to_string(), dist.to_string()]).map_err(csv_error)?;
            w.flush()?;
        }
        if a.stopped && b.stopped {
            break;
        }
    }
    let result = TwinResult { trace_a: a.trace, trace_b: b.trace, distance };
    if let Some(d) = dir {
        #[derive(Serialize)]
        struct Summary<'a> {
            config_hash: &'a str,
            identical: bool,
            tau_mem_a: Option<u64>,
            tau_mem_b: Option<u64>,
            mean_distance_before: Option<f64>,
            mean_distance_after: Option<f64>,
        }
        let ba = result.before_after();
        write_json(
            &d.join("summary.json"),
            &Summary {
                config_hash: &hash,
                identical,
                tau_mem_a: result.trace_a.tau_mem,
                tau_mem_b: result.trace_b.tau_mem,
                mean_distance_before: ba.map(|x| x.0),
                mean_distance_after: ba.map(|x| x.1),
            },
        )?;
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCell {
    pub train_size: usize,
    pub tau: u64,
    pub regime: String,
    pub copy_fraction: f64,
    pub max_error: f64,
}

/// Trains one model per training-set size and labels every checkpoint.
/// A failed size contributes a single `failed` cell.
pub fn run_phase_diagram(cfg: &RunConfig, dir: Option<&Path>) -> Result<Vec<PhaseCell>> {
    if cfg.phase.sizes.is_empty() {
        return Err(Error::InvalidArgument("phase diagram needs at least one training-set size".into()));
    }
    cfg.validate()?;
    if let Some(d) = dir {
        prepare_dir(d, cfg)?;
    }
    let th = RegimeThresholds { copy: cfg.eval.regime_copy, error: cfg.eval.regime_error };
    let run = |&p: &usize| -> Vec<PhaseCell> {
        let mut sub = cfg.clone();
        sub.data.train_size = p;
        let sub_dir: Option<PathBuf> = dir.map(|d| d.join(format!("P{p}")));
        match run_rhm_training(&sub, sub_dir.as_deref()) {
            Ok(trace) => trace
                .checkpoints
                .iter()
                .map(|c| PhaseCell {
                    train_size: p,
                    tau: c.tau,
                    regime: classify_regime(&c.error_fraction, c.copy_fraction, th).name(),
                    copy_fraction: c.copy_fraction,
                    max_error: c.error_fraction.iter().copied().fold(0.0, f64::max),
                })
                .collect(),
            Err(e) => vec![PhaseCell { train_size: p, tau: 0, regime: format!("failed: {e}"), copy_fraction: f64::NAN, max_error: f64::NAN }],
        }
    };
    let cells: Vec<PhaseCell> = if cfg.phase.workers == 1 {
        cfg.phase.sizes.iter().flat_map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.phase.workers)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        pool.install(|| cfg.phase.sizes.par_iter().map(run).collect::<Vec<_>>()).into_iter().flatten().collect()
    };
    if let Some(d) = dir {
        let mut w = csv::Writer::from_path(d.join("phase.csv")).map_err(csv_error)?;
        w.write_record(["config_hash", "train_size", "tau", "regime", "copy_fraction", "max_error"]).map_err(csv_error)?;
        let hash = cfg.hash()?;
        for c in &cells {
            w.write_record([
                hash.clone(),
                c.train_size.to_string(),
                c.tau.to_string(),
                c.regime.clone(),
                c.copy_fraction.to_string(),
                c.max_error.to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
    }
    Ok(cells)
}

/// Regime of a checkpoint under the configured thresholds.
pub fn regime(cfg: &RunConfig, c: &Checkpoint) -> RegimeLabel {
    classify_regime(&c.error_fraction, c.copy_fraction, RegimeThresholds { copy: cfg.eval.regime_copy, error: cfg.eval.regime_error })
}
