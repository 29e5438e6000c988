//! Low-rank adapters whose ranks compete for capacity.
//!
//! Each adapter carries a softmax-normalized score per rank. During training
//! the weakest ranks are periodically overwritten with mid-interval copies of
//! the strongest ones (parameters and Adam moments), with the number of
//! ranks touched set by a top-p cut under a cosine-annealed threshold.
//!
//! Module map:
//!
//! - [`tensor`], [`autodiff`]: dense tensors and a reverse-mode tape
//! - [`lora`]: the adapter layer, per-rank importance, merge
//! - [`optim`]: Adam with rank-sliceable moments
//! - [`beam`]: threshold schedule, set selection, snapshots, prune/expand
//! - [`task`], [`model`], [`train`]: synthetic tasks and the training loop
//! - [`config`], [`checkpoint`], [`io`]: persisted configs, checkpoints and run outputs
//! - [`analysis`], [`sweep`]: prune sweeps, importance profiles, parameter sweeps

pub mod analysis;
pub mod autodiff;
pub mod beam;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod io;
pub mod lora;
pub mod model;
pub mod optim;
pub mod sweep;
pub mod task;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use beam::{
    operable_count, prune_expand, select_sets, threshold_at, BeamController, BeamSchedule,
    EventStatus, Mode, OperationEvent, Snapshot,
};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use lora::{Factor, ImportanceMode, LoraAdapter, MergedAdapter, RankSlice};
pub use model::{AdapterModel, Layer, LossKind, Targets};
pub use optim::{AdamConfig, AdamState, ParamId, SliceAxis};
pub use task::{gen_teacher_student, TaskConfig, TeacherStudentTask};
pub use tensor::{softmax, Precision, Scalar, Tensor};
pub use train::{evaluate, run, train, RunRecord, TrainOptions};
