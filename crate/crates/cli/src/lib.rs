//! Command line and HTTP service for droidprobe.

pub mod api;
pub mod cli;
pub mod operator;
