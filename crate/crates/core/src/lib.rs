//! Dual-stream transformer over dynamic functional connectivity, trained with
//! a supervised contrastive objective and evaluated by subject-level
//! cross-validation on real or synthetic cohorts.

pub mod cli;
pub mod dfc;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod seed;
pub mod synthcohort;
pub mod training;

pub use error::{Error, Result};
