//! Real-time monitor: live session snapshot, admin actions and report
//! endpoints over HTTP, plus the deployment configuration shared with the CLI.

pub mod api;
pub mod config;
pub mod snapshot;

pub use api::{router, serve, AppState, WarehouseSource};
pub use config::{CawalConfig, ConfigError, MonitorConfig};
pub use snapshot::{Load, RealtimeSnapshot, SameIpGroup};
