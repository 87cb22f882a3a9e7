//! Full-mesh round-trip latency measurement.
//!
//! Probe nodes send a probe to every node (itself included) once per round
//! and record the round-trip time of each echo. A controller drives the
//! cluster over a line protocol and gathers the recorded files; the analysis
//! module turns them into per-class statistics, time series and quorum
//! latencies. [`sim`] runs a whole cluster on loopback with injected delays.

pub mod analysis;
pub mod controller;
pub mod node;
pub mod sim;
pub mod topology;
pub mod wire;
