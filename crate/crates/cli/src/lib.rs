//! Command-line front end and annotation server.

pub mod commands;
pub mod serve;
