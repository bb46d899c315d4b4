//! Sensor node side of the network: one-minute segments, lossless coding,
//! sealed envelopes, an on-node backlog and the upload/command exchange with
//! an ingest server.

pub mod backlog;
pub mod codec;
pub mod commands;
pub mod envelope;
pub mod error;
pub mod node;
pub mod segment;
pub mod server;
pub mod transport;

pub use error::{Error, Result};
