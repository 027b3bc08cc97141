//! Independent reference implementations used by the test suites.

pub mod extract;
pub mod lifecycle;
pub mod sessionize;

pub use extract::oracle_extract;
pub use lifecycle::{check_all_traces, worked_examples, LifecycleReport};
pub use sessionize::{normalize, oracle_sessions};
