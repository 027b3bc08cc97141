//! A staged day whose per-origin counts reproduce the published
//! 2018-03-14 traffic table.

use std::net::Ipv4Addr;

use cawal_core::clock::EngineTz;
use cawal_core::extract::ExtractConfig;
use cawal_core::logstore::StagedDay;
use cawal_core::model::{BrowserType, OriginClass, ProfileDirectory, RefType, Sex, UserProfile};
use cawal_core::records::{PageviewRecord, SessionClose, SessionRecord};
use cawal_core::session_store::LogoutType;
use chrono::{Duration, NaiveDate};

use crate::sim::IN_HOUSE_CIDR;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OriginRow {
    pub origin: OriginClass,
    pub users: u64,
    pub sessions: u64,
    pub pageviews: u64,
    pub pps: f64,
}

pub const ROWS: [OriginRow; 3] = [
    OriginRow {
        origin: OriginClass::InCountry,
        users: 8706,
        sessions: 11197,
        pageviews: 76069,
        pps: 6.79,
    },
    OriginRow {
        origin: OriginClass::InHouse,
        users: 5773,
        sessions: 8701,
        pageviews: 69443,
        pps: 7.98,
    },
    OriginRow {
        origin: OriginClass::OutCountry,
        users: 1702,
        sessions: 2206,
        pageviews: 16160,
        pps: 7.33,
    },
];

/// Totals row: sessions, pageviews, users, and the three ratios.
pub const TOTAL_SESSIONS: u64 = 22104;
pub const TOTAL_PAGEVIEWS: u64 = 161672;
pub const TOTAL_USERS: u64 = 16181;
pub const TOTAL_PPS: f64 = 7.31;
pub const TOTAL_PPU: f64 = 9.99;
pub const TOTAL_SPU: f64 = 1.37;

pub const SERVERS: std::ops::RangeInclusive<u16> = 3..=9;

pub fn date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2018, 3, 14).expect("valid date")
}

pub struct Table3Day {
    pub date: NaiveDate,
    pub day: StagedDay,
    pub profiles: ProfileDirectory,
    pub config: ExtractConfig,
}

const SERVICES: [&str; 5] = ["www", "obs", "ebs", "lms", "mail"];
const REF_HOSTS: [(RefType, &str); 6] = [
    (RefType::Direct, ""),
    (RefType::MainSite, "www.example.edu"),
    (RefType::Subdomain, "portal.example.edu"),
    (RefType::External, "news.example.org"),
    (RefType::SearchEngine, "www.google.com"),
    (RefType::Social, "t.co"),
];

fn user_ip(origin: OriginClass, k: u32) -> (Ipv4Addr, &'static str) {
    match origin {
        OriginClass::InHouse => (Ipv4Addr::from(u32::from(Ipv4Addr::new(193, 140, 0, 1)) + k), "TR"),
        OriginClass::InCountry => (Ipv4Addr::from(u32::from(Ipv4Addr::new(78, 160, 0, 1)) + k), "TR"),
        OriginClass::OutCountry => match k % 3 {
            0 => (Ipv4Addr::from(u32::from(Ipv4Addr::new(8, 8, 0, 1)) + k), "US"),
            1 => (Ipv4Addr::from(u32::from(Ipv4Addr::new(212, 58, 224, 1)) + k), "GB"),
            _ => (Ipv4Addr::from(u32::from(Ipv4Addr::new(217, 0, 0, 1)) + k), "DE"),
        },
    }
}

/// Builds the day from records directly. Sessions go to users round-robin
/// and pageviews spread as evenly as possible over each origin's sessions.
pub fn build_table3_day() -> Table3Day {
    let date = date();
    let midnight = EngineTz::utc().start_of(date);
    let servers: Vec<u16> = SERVERS.collect();
    let mut day = StagedDay::default();
    let mut profiles = Vec::new();
    let mut next_user_id = 1000u64;
    let mut global = 0usize;

    for (o, row) in ROWS.iter().enumerate() {
        // every third user browses as a guest
        let user_ids: Vec<u64> = (0..row.users)
            .map(|k| {
                if k % 3 == 0 {
                    0
                } else {
                    next_user_id += 1;
                    profiles.push(UserProfile {
                        user_id: next_user_id,
                        username: format!("user{next_user_id}"),
                        sex: [Sex::NotAvailable, Sex::Male, Sex::Female][(k % 5 % 3) as usize],
                    });
                    next_user_id
                }
            })
            .collect();
        let base = row.pageviews / row.sessions;
        let extra = row.pageviews % row.sessions;
        for j in 0..row.sessions {
            let k = j % row.users;
            let (ip, country) = user_ip(row.origin, k as u32);
            let id = format!("t3{o}{j:05}");
            // spread starts over 00:00..23:00 so no session crosses midnight
            let start = midnight + Duration::seconds(((j * 82_800) / row.sessions) as i64 + o as i64);
            let server = servers[global % servers.len()];
            let service = SERVICES[global % SERVICES.len()];
            let (ref_type, ref_host) = REF_HOSTS[global % REF_HOSTS.len()];
            let mobile = k % 4 == 0;

            let mut s = SessionRecord::blank(&id, start, ip);
            s.user_id = user_ids[k as usize];
            if s.user_id > 0 {
                s.username = format!("user{}", s.user_id);
            }
            s.os_name = if mobile { "Android" } else { "Windows" }.into();
            s.os_version = if mobile { "13" } else { "10" }.into();
            s.browser_name = "Chrome".into();
            s.browser_version = "114.0".into();
            s.browser_type = if mobile { BrowserType::Mobile } else { BrowserType::Desktop };
            s.lang = "tr".into();
            s.country = country.into();
            s.cookie_check = true;
            s.landing_url = format!("https://{service}.example.edu/");
            s.ref_type = ref_type;
            s.ref_host = ref_host.into();
            s.ref_name = ref_host.into();
            if ref_type == RefType::SearchEngine {
                s.ref_search_key = "example university".into();
            }
            s.server_id = server;
            s.service = service.into();
            day.sessions.push(s);

            let n = base + u64::from(j < extra);
            let mut t = start;
            for seq in 1..=n {
                let mut p = PageviewRecord::blank(&id, seq, t);
                p.url = format!("https://{service}.example.edu/page/{seq}");
                p.gen_time_ms = 40.0 + ((global as u64 + seq) % 50) as f64;
                p.db_delay_ms = 5.0;
                p.server_id = server;
                p.service = service.into();
                day.pageviews.push(p);
                if seq < n {
                    t += Duration::seconds(30);
                }
            }
            day.closes.push(SessionClose {
                session_id: id,
                ended_at: t,
                logout_type: if global.is_multiple_of(5) { LogoutType::Explicit } else { LogoutType::WindowCloseTimeout },
            });
            global += 1;
        }
    }
    day.sessions.sort_by(|a, b| (a.datetime, &a.session_id).cmp(&(b.datetime, &b.session_id)));
    day.pageviews.sort_by(|a, b| (a.datetime, &a.session_id, a.seq).cmp(&(b.datetime, &b.session_id, b.seq)));
    day.closes.sort_by(|a, b| (a.ended_at, &a.session_id).cmp(&(b.ended_at, &b.session_id)));

    Table3Day {
        date,
        day,
        profiles: ProfileDirectory::new(profiles),
        config: ExtractConfig {
            in_house: vec![IN_HOUSE_CIDR.parse().expect("valid cidr")],
            home_country: "TR".into(),
            ..ExtractConfig::default()
        },
    }
}
