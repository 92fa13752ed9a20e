//! Std companion to `iome-core`: scenario configuration, the tick-driven
//! simulator, chain dumps, auditing and the `iome` command line.

pub mod attacks;
pub mod audit;
pub mod config;
pub mod metrics;
pub mod output;
pub mod rng;
pub mod sim;
pub mod truth;
