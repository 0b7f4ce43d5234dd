//! Metrics over finished runs and the mitigation workflow.

pub mod fid;
pub mod mitigate;
pub mod report;
pub mod success;
pub mod sweep;
pub mod transfer;
pub mod votes;
