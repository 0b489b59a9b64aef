//! Deterministic discrete-event simulator for client-side circuit selection
//! in onion-routing networks.

pub mod adversary;
pub mod circuit;
pub mod config;
pub mod error;
pub mod harness;
pub mod network;
pub mod pool;
pub mod sim;
pub mod strategy;
pub mod workload;
pub mod world;
