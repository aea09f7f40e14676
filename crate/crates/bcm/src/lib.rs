//! Byzantine-tolerant causal broadcast for mobile networks.
//!
//! Mobile hosts (MH) are grouped under support stations (MSS). A host's
//! broadcast is filtered by an echo quorum at its station, ordered globally
//! with causal barriers between stations and relayed to every group; hosts
//! may move between stations while the protocol runs.

pub mod adversary;
pub mod checker;
pub mod config;
pub mod golden;
pub mod mh;
pub mod mobility;
pub mod mss;
pub mod scenarios;
pub mod sim;
pub mod types;

pub use types::*;
