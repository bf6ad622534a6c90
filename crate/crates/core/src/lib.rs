//! Random Hierarchy Model grammars, discrete diffusion kernels, exact belief
//! propagation and the measurement toolkit used to study memorization.

pub mod bp;
pub mod error;
pub mod grammar;
pub mod metrics;
pub mod noise;
pub mod predictor;

pub use error::{Error, Result};
pub use grammar::{count_total_data, Dataset, Grammar, GrammarParams, LatentTree, Symbol, TokenSequence};
pub use noise::{KernelKind, NoiseSchedule, ScheduleKind, TransitionKernel};
pub use predictor::{BpOracle, UniformPredictor, X0Predictor};
