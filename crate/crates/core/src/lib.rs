//! Proximity-based self-federated learning with compressed model exchange.
//!
//! Devices scattered over an area hold non-IID local data, train small MLPs,
//! and group themselves into federations by cross-evaluating their
//! neighbours' models. Each federation elects a leader that averages member
//! models and hands the result back. Models are pruned and/or quantized
//! before they leave a device.
//!
//! Module map:
//! - [`neuralnet`]: MLP forward/backward, masked SGD.
//! - [`compression`]: magnitude pruning, 8-bit affine quantization, wire format.
//! - [`environment`]: area, device placement, topology, data generation, IDX.
//! - [`fields`]: S/G/C blocks and broadcast over a device graph.
//! - [`protocol`]: the per-round learning loop and objective.
//! - [`harness`]: config files, experiment arms, CSV output, CLI.

pub mod compression;
pub mod environment;
pub mod error;
pub mod fields;
pub mod harness;
pub mod neuralnet;
pub mod protocol;
mod seed;

pub use error::{Error, Result};
