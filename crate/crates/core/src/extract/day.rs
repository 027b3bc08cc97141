use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::ratio;
use crate::model::OriginClass;

/// Bumped whenever a field is added, removed or redefined.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginStats {
    pub sessions: u64,
    pub pageviews: u64,
    pub users: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerStats {
    pub sessions: u64,
    pub pageviews: u64,
    pub unique_users: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostCount {
    pub host: String,
    pub sessions: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceCount {
    pub service: String,
    pub sessions: u64,
}

/// Everything the nightly job derives for one day. Scalars first; the six
/// multidimensional aggregates last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticsDay {
    pub schema_version: u32,
    pub date: NaiveDate,

    pub sessions_total: u64,
    pub pageviews_total: u64,
    pub unique_users: u64,
    pub guest_sessions: u64,
    pub authenticated_sessions: u64,

    pub in_house_sessions: u64,
    pub in_house_pageviews: u64,
    pub in_house_users: u64,
    pub in_country_sessions: u64,
    pub in_country_pageviews: u64,
    pub in_country_users: u64,
    pub out_country_sessions: u64,
    pub out_country_pageviews: u64,
    pub out_country_users: u64,

    pub pageviews_per_session: f64,
    pub pageviews_per_user: f64,
    pub sessions_per_user: f64,
    pub in_house_pps: f64,
    pub in_house_ppu: f64,
    pub in_house_spu: f64,
    pub in_country_pps: f64,
    pub in_country_ppu: f64,
    pub in_country_spu: f64,
    pub out_country_pps: f64,
    pub out_country_ppu: f64,
    pub out_country_spu: f64,

    pub avg_gen_time_ms: f64,
    pub p95_gen_time_ms: f64,
    pub max_gen_time_ms: f64,
    pub avg_db_delay_ms: f64,
    pub slow_page_count: u64,
    pub error_count: u64,
    pub unauthorized_attempt_count: u64,

    pub peak_hour: u32,
    pub peak_hour_pageviews: u64,
    pub distinct_ips: u64,
    pub multi_session_ip_count: u64,
    pub bot_sessions: u64,
    pub mobile_sessions: u64,
    pub desktop_sessions: u64,
    pub bounce_sessions: u64,
    pub cookieless_sessions: u64,
    pub avg_session_duration_s: f64,
    pub distinct_services: u64,
    pub active_servers: u64,

    /// Pageviews by hour of day and sex code (N/A, male, female).
    pub hourly_by_sex: Vec<[u64; 3]>,
    /// Sessions by referrer type code.
    pub referrer_type_freq: [u64; 6],
    pub top_ref_hosts: Vec<HostCount>,
    pub landing_service_freq: Vec<ServiceCount>,
    /// Sessions by logout type: none, explicit, window-close timeout, kicked.
    pub logout_type_freq: [u64; 4],
    pub per_server: BTreeMap<u16, ServerStats>,
}

impl AnalyticsDay {
    pub fn empty(date: NaiveDate) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            date,
            sessions_total: 0,
            pageviews_total: 0,
            unique_users: 0,
            guest_sessions: 0,
            authenticated_sessions: 0,
            in_house_sessions: 0,
            in_house_pageviews: 0,
            in_house_users: 0,
            in_country_sessions: 0,
            in_country_pageviews: 0,
            in_country_users: 0,
            out_country_sessions: 0,
            out_country_pageviews: 0,
            out_country_users: 0,
            pageviews_per_session: 0.0,
            pageviews_per_user: 0.0,
            sessions_per_user: 0.0,
            in_house_pps: 0.0,
            in_house_ppu: 0.0,
            in_house_spu: 0.0,
            in_country_pps: 0.0,
            in_country_ppu: 0.0,
            in_country_spu: 0.0,
            out_country_pps: 0.0,
            out_country_ppu: 0.0,
            out_country_spu: 0.0,
            avg_gen_time_ms: 0.0,
            p95_gen_time_ms: 0.0,
            max_gen_time_ms: 0.0,
            avg_db_delay_ms: 0.0,
            slow_page_count: 0,
            error_count: 0,
            unauthorized_attempt_count: 0,
            peak_hour: 0,
            peak_hour_pageviews: 0,
            distinct_ips: 0,
            multi_session_ip_count: 0,
            bot_sessions: 0,
            mobile_sessions: 0,
            desktop_sessions: 0,
            bounce_sessions: 0,
            cookieless_sessions: 0,
            avg_session_duration_s: 0.0,
            distinct_services: 0,
            active_servers: 0,
            hourly_by_sex: vec![[0; 3]; 24],
            referrer_type_freq: [0; 6],
            top_ref_hosts: Vec::new(),
            landing_service_freq: Vec::new(),
            logout_type_freq: [0; 4],
            per_server: BTreeMap::new(),
        }
    }

    pub fn origin(&self, class: OriginClass) -> OriginStats {
        match class {
            OriginClass::InHouse => OriginStats {
                sessions: self.in_house_sessions,
                pageviews: self.in_house_pageviews,
                users: self.in_house_users,
            },
            OriginClass::InCountry => OriginStats {
                sessions: self.in_country_sessions,
                pageviews: self.in_country_pageviews,
                users: self.in_country_users,
            },
            OriginClass::OutCountry => OriginStats {
                sessions: self.out_country_sessions,
                pageviews: self.out_country_pageviews,
                users: self.out_country_users,
            },
        }
    }

    /// Sets one origin's counts and the ratios derived from them.
    pub fn set_origin(&mut self, class: OriginClass, s: &OriginStats) {
        let (pps, ppu, spu) = (
            ratio(s.pageviews, s.sessions),
            ratio(s.pageviews, s.users),
            ratio(s.sessions, s.users),
        );
        match class {
            OriginClass::InHouse => {
                (self.in_house_sessions, self.in_house_pageviews, self.in_house_users) = (s.sessions, s.pageviews, s.users);
                (self.in_house_pps, self.in_house_ppu, self.in_house_spu) = (pps, ppu, spu);
            }
            OriginClass::InCountry => {
                (self.in_country_sessions, self.in_country_pageviews, self.in_country_users) =
                    (s.sessions, s.pageviews, s.users);
                (self.in_country_pps, self.in_country_ppu, self.in_country_spu) = (pps, ppu, spu);
            }
            OriginClass::OutCountry => {
                (self.out_country_sessions, self.out_country_pageviews, self.out_country_users) =
                    (s.sessions, s.pageviews, s.users);
                (self.out_country_pps, self.out_country_ppu, self.out_country_spu) = (pps, ppu, spu);
            }
        }
    }

    /// Canonical serialization: JSON with lexicographically sorted keys.
    pub fn to_canonical_json(&self) -> Vec<u8> {
        let value = serde_json::to_value(self).expect("analytics record serializes");
        serde_json::to_vec(&value).expect("JSON value serializes")
    }

    /// Violated sum invariants, empty when the record is consistent.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut check = |name: &str, got: u64, want: u64| {
            if got != want {
                v.push(format!("{name}: {got} != {want}"));
            }
        };
        check("referrer_type_freq", self.referrer_type_freq.iter().sum(), self.sessions_total);
        check("logout_type_freq", self.logout_type_freq.iter().sum(), self.sessions_total);
        check(
            "per_server.sessions",
            self.per_server.values().map(|s| s.sessions).sum(),
            self.sessions_total,
        );
        check(
            "per_server.pageviews",
            self.per_server.values().map(|s| s.pageviews).sum(),
            self.pageviews_total,
        );
        check(
            "hourly_by_sex",
            self.hourly_by_sex.iter().flatten().sum(),
            self.pageviews_total,
        );
        check(
            "origin sessions",
            self.in_house_sessions + self.in_country_sessions + self.out_country_sessions,
            self.sessions_total,
        );
        check(
            "origin pageviews",
            self.in_house_pageviews + self.in_country_pageviews + self.out_country_pageviews,
            self.pageviews_total,
        );
        check(
            "guest + authenticated",
            self.guest_sessions + self.authenticated_sessions,
            self.sessions_total,
        );
        check(
            "landing_service_freq",
            self.landing_service_freq.iter().map(|s| s.sessions).sum(),
            self.sessions_total,
        );
        if self.pageviews_per_session != ratio(self.pageviews_total, self.sessions_total) {
            v.push("pageviews_per_session not recomputable".into());
        }
        if self.pageviews_per_user != ratio(self.pageviews_total, self.unique_users) {
            v.push("pageviews_per_user not recomputable".into());
        }
        if self.sessions_per_user != ratio(self.sessions_total, self.unique_users) {
            v.push("sessions_per_user not recomputable".into());
        }
        v
    }
}
