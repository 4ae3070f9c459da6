//! Deterministic discrete-event simulator for dense multi-WLAN deployments.
//!
//! The crate is `no_std` (it needs `alloc`) and contains the whole protocol
//! model: the event scheduler and seeded random streams, spectrum and
//! propagation, CSMA/CA and CSMA/ECA contention, TXOP construction with
//! aggregation, piggybacking and full-duplex pairing, OFDMA and MU-MIMO
//! exchanges, and the reduction of raw tallies into reports.
//!
//! File formats, the sweep runner and the command-line front end live in the
//! companion `densewlan` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
#[macro_use]
extern crate std;

pub mod channel;
pub mod engine;
pub mod mac;
pub mod metrics;
pub mod multiuser;
pub mod scenario;
pub mod sim;

/// Simulated time in integer nanoseconds.
pub type Nanos = u64;

pub const NS_PER_US: Nanos = 1_000;
pub const NS_PER_MS: Nanos = 1_000_000;
pub const NS_PER_S: Nanos = 1_000_000_000;

pub use channel::{ChannelSet, PropagationModel};
pub use metrics::{reduce, MetricsRaw, Report};
pub use scenario::{builtin_scenario, validate, BuiltinName, Scenario};
pub use sim::{run, SimError, SimOptions, SimOutput};
