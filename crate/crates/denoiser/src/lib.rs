//! Neural x0 predictors for discrete diffusion on hierarchical data: a tree
//! U-Net whose convolutions mirror the grammar, and an MLP baseline. All
//! gradients are hand-written and checked against finite differences.

pub mod checkpoint;
pub mod generate;
pub mod loss;
pub mod net;
pub mod ops;
pub mod param;
pub mod train;

pub use generate::{generate, time_grid};
pub use loss::{LossConfig, LossValue};
pub use net::{Arch, InitScheme, Network, NetworkConfig};
pub use param::{Adam, AdamConfig, Param};
pub use train::{NoisyBatch, TrainConfig, TrainState};
