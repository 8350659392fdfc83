//! Low-rank knowledge decomposition for convolutional multi-task models.
//!
//! The engine trains a shared conv backbone together with per-task low-rank
//! expert modules. A mixed-task batch runs in a single grouped convolution
//! per layer: each sample convolves against the backbone weight plus its own
//! task's expert delta, and gradients route so experts only ever see their
//! own task's samples. After training, an expert fuses into the backbone to
//! yield a standalone per-task model at backbone size.
//!
//! Modules, bottom up:
//! - [`tensor`]: dense row-major tensors and hand-written conv kernels
//! - [`lowrank`]: expert factor pairs, weight deltas, fusion, rank planning
//! - [`eks`]: the single-pass mixed-task convolution and its gradients
//! - [`objectives`]: dice/BCE/CE losses and KL-based transfer terms
//! - [`network`]: student, teacher and fused model builders
//! - [`pipeline`]: warmup, joint training, metrics, CKA, synthetic data
//! - [`io`]: checkpoint container, run configuration, reports

pub mod error;
pub mod rng;
pub mod tensor;

pub mod eks;
pub mod lowrank;
pub mod network;
pub mod objectives;
pub mod io;
pub mod pipeline;

pub use error::{Error, Result};
pub use tensor::{
    conv2d, conv2d_backward, finite_diff_grad, ConvGeometry, ReduceOp, Scalar, Tensor,
};
