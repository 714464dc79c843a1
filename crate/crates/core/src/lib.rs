//! Deterministic executable model of transparent checkpoint-restart for
//! message-passing programs.
//!
//! The crate is split the way the system itself is split:
//!
//! * [`runtime`] is the simulated *lower half*: communicators, requests, the
//!   in-flight message store and collective rendezvous. It is thrown away at
//!   every checkpoint.
//! * [`interpose`] is the *upper half* wrapper layer: virtual handles,
//!   per-pair byte counters, the active request and communicator lists, and
//!   the checkpoint-safe decompositions of blocking calls.
//! * [`coordinator`] drives a checkpoint round: safe-point detection, the
//!   counter-based drain and the image format.
//! * [`restart`] rebuilds a lower half at the next epoch from images.
//! * [`harness`] holds the workloads, the simulation driver, the
//!   native-vs-checkpointed equivalence oracle and the sweep/fuzz drivers.

pub mod codec;
pub mod coordinator;
pub mod error;
pub mod harness;
pub mod hash;
pub mod interpose;
pub mod restart;
pub mod runtime;

pub use error::{Error, Result};
