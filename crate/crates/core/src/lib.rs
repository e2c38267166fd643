//! Gaussian mixture estimation over decentralized client networks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod design;
pub mod diagnostics;
pub mod em;
pub mod federated;
pub mod error;
pub mod gmm;
pub mod harness;
pub mod linalg;
pub mod network;
pub mod partition;
pub mod realdata;

pub use error::{Error, Result};
