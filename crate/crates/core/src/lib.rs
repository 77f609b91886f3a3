// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal analysis of latent chain-of-thought.
//!
//! A reasoning model is treated as a structural causal model over its
//! latent steps `h_1..h_T`. The crate runs step-wise do-interventions,
//! measures answer flips and early-stop behaviour, builds step-to-step
//! influence matrices and sparse graphs, and compares superposition
//! readouts from teacher forcing against linear probes.
//!
//! Models come either from the built-in toy family ([`toys`]) or from
//! NDJSON trace files produced by an external exporter ([`trace`]).
//!
//! ```
//! use latentscm::intervention::InterventionOp;
//! use latentscm::necessity::flip_profile;
//! use latentscm::toys::{make_toy, toy_dataset, ToyKind, ToyParams};
//!
//! let model = make_toy(ToyKind::Skip, 4, 6, 0, &ToyParams::default()).unwrap();
//! let data = toy_dataset(&model, 16, 0).unwrap();
//! let report = flip_profile(&model, &data, &InterventionOp::zero(), 0).unwrap();
//! assert_eq!(report.per_step.len(), 6);
//! ```

pub mod dataset;
pub mod dist;
pub mod error;
pub mod influence;
pub mod intervention;
pub mod linalg;
pub mod necessity;
pub mod readout;
pub mod results;
pub mod rng;
pub mod scm;
pub mod superposition;
pub mod toys;
pub mod trace;

pub use error::{Error, Result};
pub use scm::ModelSpec;
