//! Hindsight credit assignment for value-free policy optimization on small
//! tabular environments with sparse terminal rewards.
//!
//! The crate is `no_std` (it only needs `alloc`) and performs no IO. The
//! pipeline is split the same way a training iteration is:
//!
//! - [`env`]: enumerable episodic environments whose actions are short token
//!   sequences, plus group rollouts.
//! - [`policy`]: a tabular autoregressive softmax policy with a prior context
//!   and one hindsight context per possible final state.
//! - [`hindsight`]: generative-verification scores, self-normalized clipped
//!   ratios, refined hindsight Q-values and temporal smoothing.
//! - [`advantage`]: group-relative macro advantage, standardized micro
//!   advantage, the do-no-harm mask and the composite.
//! - [`optimizer`]: the clipped surrogate with a KL penalty, its exact
//!   gradient and a finite-difference checker.
//! - [`oracle`]: exact dynamic-programming ground truth (values, reach
//!   probabilities, hindsight posteriors, hindsight state values).
//! - [`trainer`]: the full iteration loop and its metrics.

#![no_std]
#![forbid(unsafe_code)]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod advantage;
pub mod env;
mod error;
pub mod hindsight;
mod math;
pub mod oracle;
pub mod optimizer;
pub mod policy;
pub mod rng;
pub mod stats;
pub mod trainer;

pub use crate::error::{Error, Result};
