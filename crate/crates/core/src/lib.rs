//! Clustered federated learning simulator.
//!
//! Devices train small multilayer perceptrons whose parameters split into a
//! shallow embedding block and a decision block. The server keeps a global
//! embedding (mean of all embedding blocks) and `K` cluster centers, and
//! clusters devices online by cosine similarity of low-rank projections of
//! their models. Six baseline strategies share the same round loop for
//! comparison.

pub mod clustering;
pub mod cost;
pub mod data;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod idx;
pub mod model;
pub mod par;
pub mod server;
pub mod strategy;
pub mod trainer;
pub mod vecops;

pub use error::{Error, Result};
