//! Intent-conditioned trajectory generation for multi-channel power
//! allocation: a water-filling expert, a cross-attention diffusion model over
//! transition tuples, offline batch-constrained Q-learning on the generated
//! data, and online baselines for comparison.

// `!(x > 0.0)` is how NaN inputs get rejected alongside out-of-range ones.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod env;
pub mod error;
pub mod expert;
pub mod gdm;
pub mod harness;
pub mod io;
pub mod nn;
pub mod offline_rl;
pub mod par;
pub mod wni;

pub use error::{Error, Result};
