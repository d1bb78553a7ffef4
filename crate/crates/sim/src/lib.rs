//! Scripted multi-client runs against a live server, checked by an independent oracle.

pub mod gen;
pub mod oracle;
pub mod report;
pub mod runner;
pub mod scenario;
pub mod voxel;

pub use oracle::{replay, Outcome};
pub use report::Report;
pub use runner::{run, RunError, RunOptions};
pub use scenario::{Scenario, ScenarioError};
