// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy decoder-only transformers with residual-stream instrumentation, a
//! line-level language identifier, confusion metrics, logit/tuned lenses,
//! neuron attribution and neuron editing.

pub mod attribution;
pub mod container;
pub mod corpus;
pub mod editing;
pub mod error;
pub mod io;
pub mod langid;
pub mod lens;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod tokenizer;

pub use error::{Error, Result};
