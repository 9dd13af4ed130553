//! Counterfactual per-agent policy gradients for multi-agent systems whose
//! feedback is filtered by a mechanism.
//!
//! Two mechanisms are covered. A softmax [`mechanism::Router`] deploys one
//! candidate and only the deployed reward is logged; per-agent credit comes
//! from a doubly-robust estimate of each agent's marginal contribution. An
//! [`mechanism::Aggregator`] combines every proposal into one output whose
//! shared reward is split by leave-one-out counterfactual rollouts.
//!
//! Environments are small and tabular so that every estimator can be checked
//! against exact enumeration in [`oracle`].
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! loading and the command line live in the companion `cfcredit-cli` crate.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod env;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod math;
pub mod mechanism;
pub mod optimizer;
pub mod oracle;
pub mod policy;
pub mod presets;
pub mod rollout;
pub mod stream;

pub use error::{Error, Result};
