//! Configuration and report plumbing behind the `ndcl` binary.

pub mod config;
pub mod report;
