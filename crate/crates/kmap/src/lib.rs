//! KMaP: a stateful multi-task model of student learning.
//!
//! The crate jointly models three predictions over a student's interaction
//! log: which learning material comes next, what type it will be, and how
//! the student will perform on the next assessed item. Training couples a
//! memory-based knowledge component with a recurrent behavior component and
//! clusters students by their behavioral summaries between epochs.

pub mod behavior;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod graph;
pub mod knowledge;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod profiling;
pub mod tensor;
pub mod train;

pub use error::{KmapError, Result};
