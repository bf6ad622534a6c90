//! Run configuration: a TOML document where every field has a default, plus
//! the resolved "effective" form and its hash.

use std::path::PathBuf;

use memlab_core::grammar::GrammarParams;
use memlab_core::noise::{KernelKind, ScheduleKind};
use memlab_core::{Error, Result};
use memlab_denoiser::{AdamConfig, Arch, InitScheme, LossConfig, NetworkConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    RhmTrain,
    RhmTwin,
    KernelSweep,
    PhaseDiagram,
    BpValidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentKind,
    pub grammar: GrammarSection,
    pub noise: NoiseSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
    pub seeds: Seeds,
    pub phase: PhaseSection,
    pub bp: BpSection,
    pub kernel: memlab_kernel_lab::SweepConfig,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::RhmTrain,
            grammar: GrammarSection::default(),
            noise: NoiseSection::default(),
            network: NetworkSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
            seeds: Seeds::default(),
            phase: PhaseSection::default(),
            bp: BpSection::default(),
            kernel: memlab_kernel_lab::SweepConfig::default(),
            output: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarSection {
    pub vocab: usize,
    pub synonyms: usize,
    pub depth: usize,
    pub branching: usize,
}

impl Default for GrammarSection {
    fn default() -> Self {
        Self { vocab: 8, synonyms: 2, depth: 3, branching: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub kind: KernelKind,
    pub schedule: ScheduleKind,
    pub steps: usize,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { kind: KernelKind::Uniform, schedule: ScheduleKind::Linear, steps: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub arch: Arch,
    pub channels: usize,
    pub init: InitScheme,
    pub time_dim: usize,
    pub mlp_layers: usize,
    pub base_width: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self { arch: Arch::TreeUnet, channels: 256, init: InitScheme::Mup, time_dim: 32, mlp_layers: 2, base_width: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch: usize,
    pub ce_weight: f64,
    pub max_steps: u64,
    pub checkpoints_per_decade: usize,
    /// Smallest nonzero checkpoint step; step 0 is always recorded.
    pub first_checkpoint: u64,
    /// Stop once the validation loss has triggered the memorization detector
    /// and this many further checkpoints were recorded (0 disables).
    pub stop_after_tau_mem: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 0.01,
            batch: 32,
            ce_weight: 0.0,
            max_steps: 100_000,
            checkpoints_per_decade: 8,
            first_checkpoint: 1,
            stop_after_tau_mem: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_size: usize,
    pub val_size: usize,
    /// Noisy draws per clean string in the fixed loss-evaluation sets.
    pub eval_draws: usize,
    /// Held-out strings whose trajectories probe model distances.
    pub probe_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { train_size: 512, val_size: 2048, eval_draws: 1, probe_size: 1024 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_gen: usize,
    pub gen_jumps: usize,
    pub copy_threshold: f64,
    pub delta: f64,
    pub patience: usize,
    pub regime_copy: f64,
    pub regime_error: f64,
    pub record_timestamps: bool,
    pub save_checkpoints: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_gen: 1024,
            gen_jumps: 100,
            copy_threshold: 0.0,
            delta: memlab_core::metrics::DEFAULT_DELTA,
            patience: memlab_core::metrics::DEFAULT_PATIENCE,
            regime_copy: 0.5,
            regime_error: 0.15,
            record_timestamps: false,
            save_checkpoints: false,
        }
    }
}

/// One seed per random stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub grammar: u64,
    pub data: u64,
    pub init: u64,
    pub diffusion: u64,
    pub generation: u64,
    pub probe: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { grammar: 0, data: 1, init: 2, diffusion: 3, generation: 4, probe: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSection {
    pub sizes: Vec<usize>,
    pub workers: usize,
}

impl Default for PhaseSection {
    fn default() -> Self {
        Self { sizes: vec![32, 64, 128, 256, 512], workers: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpSection {
    pub evidences: usize,
    pub noise_levels: usize,
    pub enumeration_limit: usize,
    pub tolerance: f64,
}

impl Default for BpSection {
    fn default() -> Self {
        Self { evidences: 100, noise_levels: 10, enumeration_limit: 100_000, tolerance: 1e-8 }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every resolved value, as TOML.
    pub fn effective_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }

    pub fn validate(&self) -> Result<()> {
        self.grammar_params().validate()?;
        if self.train.batch == 0 || self.noise.steps == 0 {
            return Err(Error::InvalidArgument("batch size and noise steps must be positive".into()));
        }
        if self.train.checkpoints_per_decade == 0 {
            return Err(Error::InvalidArgument("need at least one checkpoint per decade".into()));
        }
        if !(0.0..1.0).contains(&self.eval.copy_threshold) {
            return Err(Error::InvalidArgument("copy threshold must lie in [0, 1)".into()));
        }
        self.network_config().validate()
    }

    pub fn grammar_params(&self) -> GrammarParams {
        let g = &self.grammar;
        GrammarParams::new(g.vocab, g.synonyms, g.depth, g.branching, self.seeds.grammar)
    }

    pub fn network_config(&self) -> NetworkConfig {
        let g = self.grammar_params();
        let n = &self.network;
        let mut cfg = match n.arch {
            Arch::TreeUnet => NetworkConfig::tree_unet(&g, self.noise.kind, self.noise.steps, n.channels),
            Arch::Mlp => NetworkConfig::mlp(&g, self.noise.kind, self.noise.steps, n.channels),
        };
        cfg.init = n.init;
        cfg.time_dim = n.time_dim;
        cfg.mlp_layers = n.mlp_layers;
        cfg.base_width = n.base_width;
        cfg
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig { lr: self.train.lr, ..AdamConfig::default() },
            batch: self.train.batch,
            loss: LossConfig { ce_weight: self.train.ce_weight },
        }
    }
}

/// Checkpoint steps: 0, then log-spaced points from `first` up to `max`,
/// always ending at `max`.
pub fn checkpoint_schedule(first: u64, max: u64, per_decade: usize) -> Vec<u64> {
    let mut steps = vec![0];
    if max == 0 {
        return steps;
    }
    let first = first.max(1);
    let start = (first as f64).log10();
    let mut k = 0usize;
    loop {
        let tau = 10f64.powf(start + k as f64 / per_decade as f64).round() as u64;
        if tau >= max {
            break;
        }
        if tau > *steps.last().unwrap() {
            steps.push(tau);
        }
        k += 1;
    }
    steps.push(max);
    steps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg = RunConfig::from_toml("[data]\ntrain_size = 64\n[train]\nlr = 0.05\n").unwrap();
        let again = RunConfig::from_toml(&cfg.effective_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash().unwrap(), again.hash().unwrap());
        assert_ne!(cfg.hash().unwrap(), RunConfig::default().hash().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 1.0\n").is_err());
    }

    #[test]
    fn schedule_is_log_spaced() {
        let s = checkpoint_schedule(1, 1000, 8);
        assert_eq!(s[0], 0);
        assert_eq!(*s.last().unwrap(), 1000);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        // At least eight points in the decade [100, 1000).
        assert!(s.iter().filter(|&&t| (100..1000).contains(&t)).count() >= 8);
        assert_eq!(checkpoint_schedule(1, 0, 8), vec![0]);
    }
}
