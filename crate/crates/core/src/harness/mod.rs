//! Toy transformers, synthetic tasks and the training loops that exercise
//! squeezed-head supervision end to end.
//!
//! The block is pre-norm with a tanh-approximated GELU MLP and an untied
//! output head. Gradients come from the reverse-mode [`tape`]; finite
//! differences appear only in [`gradcheck`].

pub mod compare;
pub mod data;
pub mod gradcheck;
pub mod model;
pub mod tape;
pub mod train;

pub use data::{make_dataset, Sample, TaskKind};
pub use gradcheck::{grad_check, GradCheckReport};
pub use model::{TinyTransformer, TinyTransformerConfig};
pub use train::{distill_student, evaluate, train_teacher, Distiller, LossParts, RunMetrics, TrainConfig};
