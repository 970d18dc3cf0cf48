//! Learning adaptive fusion banks for multi-modal (RGB + thermal/depth)
//! salient object detection.
//!
//! The crate is self-contained: a small f64 reverse-mode autodiff engine
//! ([`tensor`]), the fusion bank and its adaptive ensemble ([`fusion`]), indirect
//! interactive guidance across levels ([`iigm`]), the end-to-end network
//! ([`network`]), the composite loss ([`losses`]), evaluation measures
//! ([`metrics`]), a synthetic challenge dataset ([`synthdata`]) and the training
//! harness ([`harness`]).

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod iigm;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
