//! Point-in-time view of the open sessions.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use cawal_core::clock::Timestamp;
use cawal_core::session_store::{LiveSession, SessionState};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Load {
    pub active_sessions: u64,
    pub guests: u64,
    pub authenticated: u64,
    /// Open sessions past the idle warning.
    pub warned: u64,
}

impl Load {
    fn add(&mut self, s: &LiveSession) {
        self.active_sessions += 1;
        if s.is_guest() {
            self.guests += 1;
        } else {
            self.authenticated += 1;
        }
        if s.state == SessionState::Warned {
            self.warned += 1;
        }
    }
}

/// Open sessions sharing one address.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SameIpGroup {
    pub ip: Ipv4Addr,
    pub session_count: u64,
    pub session_ids: Vec<String>,
    pub user_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealtimeSnapshot {
    pub taken_at: Timestamp,
    pub per_server: BTreeMap<u16, Load>,
    /// Open sessions per service.
    pub per_service: BTreeMap<String, u64>,
    pub same_ip_groups: Vec<SameIpGroup>,
    pub totals: Load,
    /// Requests refused because of a ban since the process started.
    pub rejected_requests: u64,
}

impl RealtimeSnapshot {
    pub fn build(taken_at: Timestamp, open: &[LiveSession], rejected_requests: u64) -> Self {
        let mut per_server: BTreeMap<u16, Load> = BTreeMap::new();
        let mut per_service: BTreeMap<String, u64> = BTreeMap::new();
        let mut by_ip: BTreeMap<Ipv4Addr, Vec<&LiveSession>> = BTreeMap::new();
        let mut totals = Load::default();
        for s in open.iter().filter(|s| s.is_open()) {
            totals.add(s);
            per_server.entry(s.server_id).or_default().add(s);
            *per_service.entry(s.service.clone()).or_default() += 1;
            by_ip.entry(s.ip).or_default().push(s);
        }
        let same_ip_groups = by_ip
            .into_iter()
            .filter(|(_, v)| v.len() >= 2)
            .map(|(ip, v)| {
                let mut session_ids: Vec<String> = v.iter().map(|s| s.session_id.clone()).collect();
                session_ids.sort();
                let mut user_ids: Vec<u64> = v.iter().filter_map(|s| s.user_id).collect();
                user_ids.sort_unstable();
                user_ids.dedup();
                SameIpGroup {
                    ip,
                    session_count: session_ids.len() as u64,
                    session_ids,
                    user_ids,
                }
            })
            .collect();
        Self {
            taken_at,
            per_server,
            per_service,
            same_ip_groups,
            totals,
            rejected_requests,
        }
    }
}
