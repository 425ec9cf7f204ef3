//! Tiered decentralized coordinate descent over data split by feature
//! across silos and by sample across each silo's clients.
//!
//! The crate is a deterministic simulator plus a set of reference
//! implementations used to check it:
//!
//! - [`model`]: per-silo models, the separable loss and block gradients
//! - [`data`]: vertical/horizontal partitioning, shared-seed batches
//! - [`protocol`]: hubs, clients and the round state machine
//! - [`clock`], [`metrics`]: simulated latency and evaluation
//! - [`oracles`]: centralized and single-tier references, smoothness and
//!   variance estimates, the convergence bound
//! - [`config`], [`synthetic`], [`harness`]: experiment configuration and
//!   drivers used by the `tdcd` binary

pub mod clock;
pub mod config;
pub mod data;
pub mod error;
pub mod global;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod oracles;
pub mod protocol;
pub mod rng;
pub mod synthetic;

pub use error::{Error, Result};
pub use global::GlobalModel;
