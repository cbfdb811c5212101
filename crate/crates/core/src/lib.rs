//! Harness for measuring how long a language agent can keep executing a
//! simple stateful task: a key-value running sum spread over many turns.
//!
//! The crate generates seeded task instances, renders the conversation,
//! drives simulated or remote agents, grades replies, aggregates per-turn
//! accuracy curves, and provides the closed-form horizon model they are
//! compared against.

mod error;

pub mod agents;
pub mod experiments;
pub mod grading;
pub mod metrics;
pub mod protocol;
pub mod seed;
pub mod store;
pub mod taskgen;
pub mod theory;

pub use error::{Error, Result};
