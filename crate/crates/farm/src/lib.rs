//! Web-farm simulation, benchmarks, fixture days and reference oracles.

pub mod bench;
pub mod config;
pub mod oracle;
pub mod sim;
pub mod synth;
pub mod table3;

pub use bench::{mode_configs, run_benchmark, BenchReport, ModeResult};
pub use config::{ConfigError, CostModel, DistSpec, LbPolicy, Mode, SimConfig};
pub use sim::{build_trace, run_simulation, SimOutput, SimReport, Trace};
pub use table3::{build_table3_day, Table3Day};
