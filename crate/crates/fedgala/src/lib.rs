//! Desk-scale simulator for gradient-aligned federated self-supervised
//! learning on synthetic Gaussian domains, together with executable checks
//! of the covariance and alignment properties the protocol relies on.
//!
//! The crate is organized around the protocol round: `domains` generates the
//! multi-domain data, `encoders` + `losses` give clients something to train,
//! `local_align` filters batch gradients on the client, `global_align`
//! reweighs client updates on the server, `protocol` orchestrates rounds,
//! `probe` measures representation quality on held-out domains, and `theory`
//! hosts the statistical checks. Everything is deterministic given a seed;
//! see `rng`.

pub mod config;
pub mod domains;
pub mod encoders;
pub mod error;
pub mod exec;
pub mod global_align;
pub mod linalg;
pub mod local_align;
pub mod losses;
pub mod outputs;
pub mod probe;
pub mod protocol;
pub mod rng;
pub mod sweeps;
pub mod textio;
pub mod theory;
pub mod variants;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
