//! Advocacy learning.
//!
//! A set of class-assigned *advocate* subnetworks each produce an attention
//! map over the input; the masked inputs (evidence) are stacked and passed to
//! a *judge* classifier. The judge minimizes cross-entropy while each advocate
//! minimizes `-log ŷ[i]` for its own class `i`, with interleaved per-subnetwork
//! updates. Everything runs on the small reverse-mode tape in [`autodiff`].

pub mod autodiff;
pub mod checkpoint;
pub mod class;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
