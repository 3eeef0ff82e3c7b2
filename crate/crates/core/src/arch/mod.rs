//! SumNet and Recombinator network builders.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_HEADER};
pub use config::{apply_branch_mask, pool_for, Arch, BranchMask, NetworkConfig, UpsampleMode, MAX_BRANCHES};
pub use network::{build_rcn, build_sumnet, keypoint_terms, LayerSpec, ModelConfig, Network, ParamVars, ALPHA};
