//! Straight-line recomputation of an analytics day. Every field is derived by
//! its own rescan of the staged rows; nothing is shared with the extractor
//! beyond the record type.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use cawal_core::extract::{AnalyticsDay, ExtractConfig, HostCount, ServerStats, ServiceCount};
use cawal_core::logstore::StagedDay;
use cawal_core::model::{BrowserType, ProfileDirectory, Sex};
use cawal_core::records::{PageviewRecord, SessionRecord};
use cawal_core::session_store::LogoutType;
use chrono::{NaiveDate, Timelike};

fn r2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn div(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        r2(a as f64 / b as f64)
    }
}

fn local_date(cfg: &ExtractConfig, t: chrono::DateTime<chrono::Utc>) -> NaiveDate {
    t.with_timezone(&cfg.tz.0).date_naive()
}

fn local_hour(cfg: &ExtractConfig, t: chrono::DateTime<chrono::Utc>) -> usize {
    t.with_timezone(&cfg.tz.0).hour() as usize
}

fn in_block(ip: Ipv4Addr, block: &str) -> bool {
    let (net, prefix) = block.split_once('/').expect("cidr display has a prefix");
    let prefix: u32 = prefix.parse().expect("numeric prefix");
    let net: Ipv4Addr = net.parse().expect("cidr network");
    let shift = 32 - prefix;
    shift == 32 || (u32::from(ip) >> shift) == (u32::from(net) >> shift)
}

fn origin_of(cfg: &ExtractConfig, s: &SessionRecord) -> usize {
    if cfg.in_house.iter().any(|c| in_block(s.ip, &c.to_string())) {
        0
    } else if s.country == cfg.home_country {
        1
    } else {
        2
    }
}

fn identity(s: &SessionRecord) -> String {
    match s.user_id {
        0 => format!(
            "g:{}|{}|{}|{}|{}",
            s.ip, s.os_name, s.os_version, s.browser_name, s.browser_version
        ),
        id => format!("u:{id}"),
    }
}

fn distinct(mut v: Vec<String>) -> u64 {
    v.sort();
    v.dedup();
    v.len() as u64
}

fn sex_index(profiles: &ProfileDirectory, user_id: u64) -> usize {
    match profiles.get(user_id).map(|p| p.sex) {
        Some(Sex::Male) => 1,
        Some(Sex::Female) => 2,
        _ => 0,
    }
}

/// The day's sessions: first row per id whose start falls on `date`.
fn day_sessions<'a>(day: &'a StagedDay, date: NaiveDate, cfg: &ExtractConfig) -> Vec<&'a SessionRecord> {
    let mut out: Vec<&SessionRecord> = Vec::new();
    for s in &day.sessions {
        if local_date(cfg, s.datetime) == date && !out.iter().any(|o| o.session_id == s.session_id) {
            out.push(s);
        }
    }
    out
}

fn owner<'a>(sessions: &[&'a SessionRecord], p: &PageviewRecord) -> Option<&'a SessionRecord> {
    sessions.iter().find(|s| s.session_id == p.session_id).copied()
}

pub fn oracle_extract(
    day: &StagedDay,
    date: NaiveDate,
    profiles: &ProfileDirectory,
    cfg: &ExtractConfig,
) -> AnalyticsDay {
    let sessions = day_sessions(day, date, cfg);
    let pageviews: Vec<&PageviewRecord> = day.pageviews.iter().filter(|p| owner(&sessions, p).is_some()).collect();
    let pv_of = |s: &SessionRecord| -> Vec<&PageviewRecord> {
        pageviews.iter().filter(|p| p.session_id == s.session_id).copied().collect()
    };
    let mut out = AnalyticsDay::empty(date);

    out.sessions_total = sessions.len() as u64;
    out.pageviews_total = pageviews.len() as u64;
    out.unique_users = distinct(sessions.iter().map(|s| identity(s)).collect());
    out.guest_sessions = sessions.iter().filter(|s| s.user_id == 0).count() as u64;
    out.authenticated_sessions = sessions.iter().filter(|s| s.user_id != 0).count() as u64;

    let origin_counts = |o: usize| -> (u64, u64, u64) {
        let mine: Vec<&&SessionRecord> = sessions.iter().filter(|s| origin_of(cfg, s) == o).collect();
        let pv: u64 = mine.iter().map(|s| pv_of(s).len() as u64).sum();
        let users = distinct(mine.iter().map(|s| identity(s)).collect());
        (mine.len() as u64, pv, users)
    };
    let (s, p, u) = origin_counts(0);
    (out.in_house_sessions, out.in_house_pageviews, out.in_house_users) = (s, p, u);
    (out.in_house_pps, out.in_house_ppu, out.in_house_spu) = (div(p, s), div(p, u), div(s, u));
    let (s, p, u) = origin_counts(1);
    (out.in_country_sessions, out.in_country_pageviews, out.in_country_users) = (s, p, u);
    (out.in_country_pps, out.in_country_ppu, out.in_country_spu) = (div(p, s), div(p, u), div(s, u));
    let (s, p, u) = origin_counts(2);
    (out.out_country_sessions, out.out_country_pageviews, out.out_country_users) = (s, p, u);
    (out.out_country_pps, out.out_country_ppu, out.out_country_spu) = (div(p, s), div(p, u), div(s, u));

    out.pageviews_per_session = div(out.pageviews_total, out.sessions_total);
    out.pageviews_per_user = div(out.pageviews_total, out.unique_users);
    out.sessions_per_user = div(out.sessions_total, out.unique_users);

    if !pageviews.is_empty() {
        let n = pageviews.len() as f64;
        let mut gen_sum = 0.0;
        for p in &pageviews {
            gen_sum += p.gen_time_ms;
        }
        out.avg_gen_time_ms = r2(gen_sum / n);
        let mut db_sum = 0.0;
        for p in &pageviews {
            db_sum += p.db_delay_ms;
        }
        out.avg_db_delay_ms = r2(db_sum / n);
        let mut sorted: Vec<f64> = pageviews.iter().map(|p| p.gen_time_ms).collect();
        sorted.sort_by(f64::total_cmp);
        let target = 0.95 * n;
        let p95 = sorted
            .iter()
            .enumerate()
            .find(|(i, _)| (i + 1) as f64 >= target)
            .map(|(_, v)| *v)
            .unwrap_or(sorted[0]);
        out.p95_gen_time_ms = r2(p95);
        out.max_gen_time_ms = r2(pageviews.iter().map(|p| p.gen_time_ms).fold(f64::NEG_INFINITY, f64::max));
    }
    out.slow_page_count = pageviews.iter().filter(|p| p.gen_time_ms > cfg.slow_page_ms).count() as u64;
    out.error_count = pageviews.iter().filter(|p| p.error_code != 0).count() as u64;
    out.unauthorized_attempt_count = pageviews
        .iter()
        .filter(|p| p.error_code == 401 || p.error_code == 403)
        .count() as u64;

    for h in 0..24 {
        for sex in 0..3 {
            out.hourly_by_sex[h][sex] = pageviews
                .iter()
                .filter(|p| {
                    local_hour(cfg, p.datetime) == h
                        && sex_index(profiles, owner(&sessions, p).expect("owned").user_id) == sex
                })
                .count() as u64;
        }
    }
    for h in 0..24 {
        let n: u64 = out.hourly_by_sex[h].iter().sum();
        if n > out.peak_hour_pageviews {
            out.peak_hour = h as u32;
            out.peak_hour_pageviews = n;
        }
    }

    let mut ips: Vec<Ipv4Addr> = sessions.iter().map(|s| s.ip).collect();
    ips.sort();
    ips.dedup();
    out.distinct_ips = ips.len() as u64;
    out.multi_session_ip_count = ips
        .iter()
        .filter(|ip| sessions.iter().filter(|s| s.ip == **ip).count() >= 2)
        .count() as u64;
    out.bot_sessions = sessions.iter().filter(|s| s.browser_type == BrowserType::Bot).count() as u64;
    out.mobile_sessions = sessions.iter().filter(|s| s.browser_type == BrowserType::Mobile).count() as u64;
    out.desktop_sessions = sessions.iter().filter(|s| s.browser_type == BrowserType::Desktop).count() as u64;
    out.bounce_sessions = sessions.iter().filter(|s| pv_of(s).len() == 1).count() as u64;
    out.cookieless_sessions = sessions.iter().filter(|s| !s.cookie_check).count() as u64;
    if !sessions.is_empty() {
        let mut total = 0.0;
        for s in &sessions {
            if let Some(last) = pv_of(s).iter().map(|p| p.datetime).max() {
                total += (last - s.datetime).num_milliseconds().max(0) as f64 / 1000.0;
            }
        }
        out.avg_session_duration_s = r2(total / sessions.len() as f64);
    }
    let mut services: Vec<String> = pageviews.iter().map(|p| p.service.clone()).collect();
    out.distinct_services = distinct(std::mem::take(&mut services));

    for t in 0..6 {
        out.referrer_type_freq[t] = sessions.iter().filter(|s| s.ref_type.index() == t).count() as u64;
    }
    let mut hosts: Vec<HostCount> = Vec::new();
    for s in &sessions {
        if s.ref_host.is_empty() || hosts.iter().any(|h| h.host == s.ref_host) {
            continue;
        }
        hosts.push(HostCount {
            host: s.ref_host.clone(),
            sessions: sessions.iter().filter(|x| x.ref_host == s.ref_host).count() as u64,
        });
    }
    hosts.sort_by(|a, b| (std::cmp::Reverse(a.sessions), &a.host).cmp(&(std::cmp::Reverse(b.sessions), &b.host)));
    hosts.truncate(50);
    out.top_ref_hosts = hosts;

    let mut landing: Vec<ServiceCount> = Vec::new();
    for s in &sessions {
        if landing.iter().any(|l| l.service == s.service) {
            continue;
        }
        landing.push(ServiceCount {
            service: s.service.clone(),
            sessions: sessions.iter().filter(|x| x.service == s.service).count() as u64,
        });
    }
    landing.sort_by(|a, b| (std::cmp::Reverse(a.sessions), &a.service).cmp(&(std::cmp::Reverse(b.sessions), &b.service)));
    out.landing_service_freq = landing;

    for s in &sessions {
        let logout = day
            .closes
            .iter()
            .find(|c| c.session_id == s.session_id)
            .map_or(LogoutType::None, |c| c.logout_type);
        let i = match logout {
            LogoutType::None => 0,
            LogoutType::Explicit => 1,
            LogoutType::WindowCloseTimeout => 2,
            LogoutType::Kicked => 3,
        };
        out.logout_type_freq[i] += 1;
    }

    let mut server_ids: Vec<u16> = sessions
        .iter()
        .map(|s| s.server_id)
        .chain(pageviews.iter().map(|p| p.server_id))
        .collect();
    server_ids.sort_unstable();
    server_ids.dedup();
    let mut per_server = BTreeMap::new();
    for id in server_ids {
        let on_server: Vec<&&PageviewRecord> = pageviews.iter().filter(|p| p.server_id == id).collect();
        per_server.insert(
            id,
            ServerStats {
                sessions: sessions.iter().filter(|s| s.server_id == id).count() as u64,
                pageviews: on_server.len() as u64,
                unique_users: distinct(
                    on_server
                        .iter()
                        .map(|p| identity(owner(&sessions, p).expect("owned")))
                        .collect(),
                ),
            },
        );
    }
    out.active_servers = per_server.values().filter(|s| s.pageviews > 0).count() as u64;
    out.per_server = per_server;
    out
}
