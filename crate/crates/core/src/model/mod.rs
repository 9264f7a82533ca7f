//! The toy multimodal transformer and the execution hooks its forward pass calls.

mod config;
mod exec;
mod layers;
mod toy;

pub use config::ToyMllmConfig;
pub use exec::{Exec, FloatExec, LinearKind, Part, RowContext, SiteId};
pub use layers::{Activation, Attention, Block, Linear, Mlp, Norm, NormKind, OnlineHadamard};
pub use toy::{LanguageModel, ToyMllm, VisionTower};
