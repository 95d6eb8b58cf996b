//! Experiment driver: configuration, multi-chain runs, exports.

pub mod config;
pub mod error;
pub mod experiment;
pub mod export;
pub mod run;
