//! Squeezing-heads attention distillation.
//!
//! A teacher's `h_t` attention maps per layer are merged into `h_s` maps (one per
//! student head) by convex combinations whose coefficients minimise the
//! reconstruction error of the attention output. The merged maps supervise a
//! student through a KL term added to its ordinary training loss.
//!
//! Module map:
//! - [`numkernel`]: dense matrices, softmax, pseudo-inverse, simplex projection.
//! - [`attention`]: multi-head attention exposing per-head maps and value terms.
//! - [`squeeze`]: closed-form merging plus the ablation strategies.
//! - [`oracle`]: exact unconstrained and constrained reference solvers.
//! - [`distill`]: attention-map, logit and feature distillation losses.
//! - [`harness`]: tiny transformer, synthetic tasks, training and gradient checks.
//! - [`par`]: the parallel/sequential execution switch.

pub mod attention;
pub mod distill;
pub mod error;
pub mod harness;
pub mod numkernel;
pub mod oracle;
pub mod par;
pub mod squeeze;

pub use error::{Result, ShdError};
pub use numkernel::{Mask, Matrix, SeededRng};
pub use par::Exec;
