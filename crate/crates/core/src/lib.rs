//! Coarse-to-fine keypoint localization networks on a small
//! reverse-mode differentiation engine.

pub mod arch;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod kv;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod tape;
pub mod trainer;
pub mod tensor;

pub use arch::{build_rcn, build_sumnet, Arch, BranchMask, ModelConfig, Network, NetworkConfig};
pub use error::{Error, Result};
pub use exec::Exec;
pub use metrics::{EvalConfig, Keypoint, KeypointSet, ProbMaps};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Dims, Tensor4};
