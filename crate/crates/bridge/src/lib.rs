//! Lets an external process serve masked-position logits.
//!
//! The wire format is newline-delimited JSON ([`protocol`]). [`RemoteScorer`]
//! implements [`seqmc_core::Scorer`] over a TCP socket or a child process's
//! stdio, and [`server`] answers the same protocol for any local scorer.

pub mod client;
pub mod error;
pub mod protocol;
pub mod server;

pub use client::{handshake, ClientConfig, Connection, Endpoint, ModelInfo, RemoteScorer};
pub use error::BridgeError;
pub use protocol::{Message, PROTOCOL_VERSION};
