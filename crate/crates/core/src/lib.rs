//! Discrete-time model of a three-tier (IoT device, UAV, cloud) edge computing
//! system and the deterministic actor-critic agents that allocate its
//! resources slot by slot.
//!
//! The crate is `no_std` with `alloc`. Everything random flows through
//! explicitly seeded generators, so an environment or a learner is a pure
//! function of its configuration and seed.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod agents;
pub mod compute;
pub mod env;
mod error;
pub mod nn;
pub mod objective;
pub mod radio;

pub use error::{Error, Result};

/// Seeded generator used by every stochastic component.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Bits in one megabyte (decimal megabyte of 8 bits per byte).
pub const BITS_PER_MB: f64 = 8.0e6;
