//! Knowledge tracing with an encoder-decoder transformer whose decoder sees
//! the time since the previous interaction at three granularities (seconds,
//! minutes, days).
//!
//! Pipeline: [`data`] parses interaction logs, [`features`] turns user
//! histories into fixed-length token windows, [`model`] holds the network,
//! [`train`] fits it with binary cross-entropy and AdamW, and [`eval`] scores
//! predictions by AUC. [`synthetic`] generates logs with a planted lag effect.

pub mod checkpoint;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
