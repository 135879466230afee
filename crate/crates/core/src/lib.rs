//! Continual learning with decomposed dual-rank adapters and
//! attention-weighted component banks.

pub mod adapter;
pub mod checkpoint;
pub mod error;
pub mod lifecycle;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod tasks;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
