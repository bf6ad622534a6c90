//! Score learning on finite Gaussian clouds: when does a network start to
//! reproduce the empirical score, and how does that time scale with the
//! number of points, the noise level and the batch size.

pub mod cloud;
pub mod kernel;
pub mod net;
pub mod sweep;

pub use cloud::{mixture_score, GaussianCloud};
pub use kernel::{eigen_oracle, fit_powerlaw, EigenEstimate, KernelSpec, ModeAnsatz, PowerLawFit};
pub use net::{train_score_net, Scaling, ScoreNet, ScoreTrace, ScoreTrainConfig, Target};
pub use sweep::{sweep_tau_mem, Axis, SweepConfig, SweepRow, SweepTable};
