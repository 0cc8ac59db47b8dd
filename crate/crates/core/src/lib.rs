//! Plan-guided, human-gated automation of Android rooting and exploitation
//! test campaigns against lab devices.
//!
//! The pieces: a rooting plan graph ([`plan`]), an LLM gateway that turns
//! plan steps into scripts ([`llm`], [`script`]), an approval gate that keeps
//! unreviewed code off devices ([`approval`]), device adapters and a
//! simulator ([`device`]), the campaign engine ([`engine`]), an append-only
//! run store ([`store`]) and reporting ([`metrics`]).

pub mod approval;
pub mod config;
pub mod device;
pub mod engine;
pub mod llm;
pub mod metrics;
pub mod plan;
pub mod script;
pub mod store;

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of `text`.
pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}
