//! Model merging with elected task vectors, 1-bit masks and per-task
//! rescalers, plus reference merging baselines and weight-space diagnostics.
//!
//! The usual flow reads a base checkpoint and several finetuned checkpoints,
//! builds a [`TaskVectorSet`], merges it with [`emr_merge`], stores the
//! result with [`store::save_bundle`], and later rebuilds one task's model
//! with [`EmrBundle::reconstruct_task`] and [`apply_task_vector`].

pub mod analysis;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod emr;
pub mod error;
pub mod numeric;
pub mod store;
pub mod task_vector;

pub use checkpoint::{Checkpoint, ComputeDType, DType, Tensor};
pub use emr::{emr_merge, modulate, EmrBundle, EmrOptions, RescalerScope};
pub use error::{Error, Result};
pub use task_vector::{apply_task_vector, compute_task_vector, TaskVector, TaskVectorSet};
