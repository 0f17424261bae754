// SPDX-License-Identifier: MIT OR Apache-2.0

//! SAE feature scoring and steering over a small deterministic
//! decoder-only transformer.
//!
//! Features are characterised two ways: by the tokens they fire on
//! (input score) and by what amplifying them does to the model's output
//! distribution (output score). Both are measured against the feature's
//! logit-lens token set. The [`evalsuite`] module turns steered
//! generations into the reports used to compare the two.

pub mod error;
pub mod evalsuite;
pub mod fixture;
pub mod io;
pub mod lens;
pub mod model;
pub mod numerics;
pub mod prefixes;
pub mod sae;
pub mod scoring;
pub mod steering;

pub use error::{ContainerError, Error, Result};
pub use prefixes::{default_prefixes, NEUTRAL_PROMPT};
