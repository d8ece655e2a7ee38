//! Motor-state assessment for Parkinson's disease from one-minute windows of
//! wrist accelerometry.

pub mod cam;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod net;
pub mod signal;
pub mod tensor;

pub use error::{Error, Result};
