use std::net::Ipv4Addr;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUNDLED_GEOIP: &str = include_str!("../../data/geoip.csv");

/// Country code returned for addresses outside every range.
pub const UNKNOWN_COUNTRY: &str = "ZZ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeoEntry {
    pub ip_range_start: u32,
    pub ip_range_end: u32,
    pub country: String,
}

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("range {0} starts before the previous range ends")]
    Overlap(usize),
    #[error("range {0} has start > end")]
    Inverted(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sorted, non-overlapping IPv4 ranges.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GeoTable {
    entries: Vec<GeoEntry>,
}

impl GeoTable {
    pub fn new(entries: Vec<GeoEntry>) -> Result<Self, GeoError> {
        for (i, e) in entries.iter().enumerate() {
            if e.ip_range_start > e.ip_range_end {
                return Err(GeoError::Inverted(i));
            }
            if i > 0 && entries[i - 1].ip_range_end >= e.ip_range_start {
                return Err(GeoError::Overlap(i));
            }
        }
        Ok(Self { entries })
    }

    /// Parses `start_ip,end_ip,country`; addresses may be dotted quads or integers.
    /// A header line and `#` comments are skipped.
    pub fn from_csv(text: &str) -> Result<Self, GeoError> {
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("start_ip") {
                continue;
            }
            let parse_err = |msg: &str| GeoError::Parse {
                line: idx + 1,
                msg: msg.to_string(),
            };
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 3 {
                return Err(parse_err("expected start_ip,end_ip,country"));
            }
            let start = parse_ip(cols[0]).ok_or_else(|| parse_err("bad start_ip"))?;
            let end = parse_ip(cols[1]).ok_or_else(|| parse_err("bad end_ip"))?;
            entries.push(GeoEntry {
                ip_range_start: start,
                ip_range_end: end,
                country: cols[2].to_string(),
            });
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self, GeoError> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    pub fn bundled() -> Self {
        Self::from_csv(BUNDLED_GEOIP).expect("bundled GeoIP table is valid")
    }

    pub fn entries(&self) -> &[GeoEntry] {
        &self.entries
    }

    pub fn lookup(&self, ip: Ipv4Addr) -> &str {
        geo_lookup(ip, &self.entries)
    }
}

fn parse_ip(s: &str) -> Option<u32> {
    Ipv4Addr::from_str(s)
        .map(u32::from)
        .ok()
        .or_else(|| s.parse::<u32>().ok())
}

/// Binary search over sorted ranges; `"ZZ"` on a miss.
pub fn geo_lookup(ip: Ipv4Addr, table: &[GeoEntry]) -> &str {
    let ip = u32::from(ip);
    // first range whose end is >= ip
    let idx = table.partition_point(|e| e.ip_range_end < ip);
    match table.get(idx) {
        Some(e) if e.ip_range_start <= ip => &e.country,
        _ => UNKNOWN_COUNTRY,
    }
}
