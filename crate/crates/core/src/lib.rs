//! Future-aware teacher/student distillation for graph-based stock trend prediction.
//!
//! A teacher encoder sees the realised trend over the prediction horizon and
//! fuses it with a spatiotemporal embedding of the lookback; a history-only
//! student is trained to depend on the teacher's representation and is the
//! only model used at inference time.

pub mod config;
pub mod distill;
pub mod error;
pub mod evalkit;
pub mod marketdata;
pub mod nn;
pub mod optim;
pub mod stgnn;
pub mod teacher;
pub mod train;

pub use error::{DishftError, Result};
