//! Unified server-side web analytics and application logging.
//!
//! Requests are captured inside the application path ([`capture`]), joined into
//! sessions shared by every server of a farm ([`session_store`]), appended to a
//! day-partitioned log ([`logstore`]), condensed nightly into one
//! [`extract::AnalyticsDay`] record per day and loaded into monthly data marts
//! ([`warehouse`]). [`sessionize`] reconstructs sessions offline from raw logs.

pub mod clock;
pub mod model;
pub mod session_store;
pub mod logstore;
pub mod records;
pub mod capture;
pub mod sessionize;
pub mod extract;
pub mod warehouse;
