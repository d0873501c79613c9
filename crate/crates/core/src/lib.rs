//! Desk-scale driving imitation lab.
//!
//! A deterministic 2D driving simulator with dynamic agents, a privileged
//! rule-based expert demonstrator, a conditional imitation-learning trainer
//! built on a from-scratch reverse-mode gradient engine, and a NoCrash-style
//! benchmark harness.
//!
//! Everything is seeded: rebuilding a town, recollecting a dataset, retraining
//! a policy, or rerunning a benchmark with the same seeds reproduces the same
//! bytes on disk.

pub mod bench;
pub mod dataset;
pub mod expert;
pub mod geom;
pub mod model;
pub mod rng;
pub mod sim;
pub mod town;
pub mod train;

pub use sim::HighLevelCommand;
