//! Nightly analytics extraction: one [`AnalyticsDay`] record per calendar day.

mod day;
mod nightly;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use thiserror::Error;

pub use day::{AnalyticsDay, HostCount, OriginStats, ServerStats, ServiceCount, SCHEMA_VERSION};
pub use nightly::{run_nightly, JobLog, JobReport, NightlyContext, Stage, StageOutcome, StageReport};

use crate::clock::EngineTz;
use crate::logstore::{LogError, StagingHandle};
use crate::model::{classify_origin_by_country, BrowserType, Cidr, OriginClass, ProfileDirectory};
use crate::records::{PageviewRecord, SessionRecord};
use crate::session_store::LogoutType;

/// Maximum number of entries kept in `top_ref_hosts`.
pub const TOP_REF_HOSTS: usize = 50;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("staging handle is for {found}, extraction asked for {wanted}")]
    DateMismatch { wanted: NaiveDate, found: NaiveDate },
    #[error("no analytics record for {0}")]
    NotFound(NaiveDate),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone)]
pub struct ExtractConfig {
    pub tz: EngineTz,
    pub in_house: Vec<Cidr>,
    pub home_country: String,
    /// Pages generated slower than this (strictly) count as slow.
    pub slow_page_ms: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            tz: EngineTz::utc(),
            in_house: Vec::new(),
            home_country: "TR".into(),
            slow_page_ms: 1000.0,
        }
    }
}

/// Every session counts toward the day it started on, including the pageviews
/// it produces after midnight.
pub fn attribute_day(sessions: &[SessionRecord], tz: EngineTz) -> BTreeMap<String, NaiveDate> {
    sessions
        .iter()
        .map(|s| (s.session_id.clone(), tz.date_of(s.datetime)))
        .collect()
}

/// Two-decimal rounding used for every derived value in the record.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

pub fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        round2(num as f64 / den as f64)
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile_nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Default)]
struct SessionAcc<'a> {
    rec: Option<&'a SessionRecord>,
    pageviews: u64,
    last_seen: Option<chrono::DateTime<chrono::Utc>>,
}

/// Condenses a staged day into its analytics record.
pub fn extract_day(
    staging: &StagingHandle,
    date: NaiveDate,
    profiles: &ProfileDirectory,
    cfg: &ExtractConfig,
    log: &JobLog,
) -> Result<AnalyticsDay, ExtractError> {
    if staging.date() != date {
        return Err(ExtractError::DateMismatch {
            wanted: date,
            found: staging.date(),
        });
    }
    let day = staging.day();
    log.event("extract.progress", &format!("{date}: {} staged sessions", day.sessions.len()))?;
    let record = compute(&day.sessions, &day.pageviews, &day.closes, date, profiles, cfg);
    log.event(
        "extract.progress",
        &format!(
            "{date}: {} sessions, {} pageviews aggregated",
            record.sessions_total, record.pageviews_total
        ),
    )?;
    Ok(record)
}

fn compute(
    sessions: &[SessionRecord],
    pageviews: &[PageviewRecord],
    closes: &[crate::records::SessionClose],
    date: NaiveDate,
    profiles: &ProfileDirectory,
    cfg: &ExtractConfig,
) -> AnalyticsDay {
    let tz = cfg.tz;
    let mut out = AnalyticsDay::empty(date);

    // sessions attributed to this date, in append order
    let mut accs: HashMap<&str, SessionAcc> = HashMap::new();
    let mut order: Vec<&SessionRecord> = Vec::new();
    for s in sessions {
        if tz.date_of(s.datetime) != date || accs.contains_key(s.session_id.as_str()) {
            continue;
        }
        accs.insert(
            &s.session_id,
            SessionAcc {
                rec: Some(s),
                ..Default::default()
            },
        );
        order.push(s);
    }

    let mut gen_times: Vec<f64> = Vec::new();
    let mut gen_sum = 0.0;
    let mut db_sum = 0.0;
    let mut server_users: BTreeMap<u16, HashSet<String>> = BTreeMap::new();
    let mut services: HashSet<&str> = HashSet::new();
    for p in pageviews {
        let Some(acc) = accs.get_mut(p.session_id.as_str()) else {
            continue;
        };
        let s = acc.rec.expect("accumulator has its record");
        acc.pageviews += 1;
        acc.last_seen = Some(acc.last_seen.map_or(p.datetime, |t| t.max(p.datetime)));

        out.pageviews_total += 1;
        gen_times.push(p.gen_time_ms);
        gen_sum += p.gen_time_ms;
        db_sum += p.db_delay_ms;
        if p.gen_time_ms > cfg.slow_page_ms {
            out.slow_page_count += 1;
        }
        if p.error_code != 0 {
            out.error_count += 1;
        }
        if matches!(p.error_code, 401 | 403) {
            out.unauthorized_attempt_count += 1;
        }
        let hour = tz.hour_of(p.datetime) as usize;
        out.hourly_by_sex[hour][profiles.sex_of(s.user_id).index()] += 1;
        let server = out.per_server.entry(p.server_id).or_default();
        server.pageviews += 1;
        server_users.entry(p.server_id).or_default().insert(s.user_key());
        services.insert(p.service.as_str());
    }

    let mut logout_of: HashMap<&str, LogoutType> = HashMap::new();
    for c in closes {
        logout_of.entry(c.session_id.as_str()).or_insert(c.logout_type);
    }

    let mut users: HashSet<String> = HashSet::new();
    let mut origin_users: [HashSet<String>; 3] = Default::default();
    let mut origin_stats: [OriginStats; 3] = Default::default();
    let mut ip_sessions: BTreeMap<std::net::Ipv4Addr, u64> = BTreeMap::new();
    let mut ref_hosts: BTreeMap<&str, u64> = BTreeMap::new();
    let mut landing: BTreeMap<&str, u64> = BTreeMap::new();
    let mut duration_sum = 0.0;
    for s in &order {
        let acc = &accs[s.session_id.as_str()];
        let key = s.user_key();
        out.sessions_total += 1;
        if s.is_guest() {
            out.guest_sessions += 1;
        } else {
            out.authenticated_sessions += 1;
        }
        let origin = classify_origin_by_country(s.ip, &cfg.in_house, &cfg.home_country, &s.country);
        let o = origin_index(origin);
        origin_stats[o].sessions += 1;
        origin_stats[o].pageviews += acc.pageviews;
        origin_users[o].insert(key.clone());
        users.insert(key);

        *ip_sessions.entry(s.ip).or_default() += 1;
        match s.browser_type {
            BrowserType::Bot => out.bot_sessions += 1,
            BrowserType::Mobile => out.mobile_sessions += 1,
            BrowserType::Desktop => out.desktop_sessions += 1,
            BrowserType::Unknown => {}
        }
        if acc.pageviews == 1 {
            out.bounce_sessions += 1;
        }
        if !s.cookie_check {
            out.cookieless_sessions += 1;
        }
        if let Some(last) = acc.last_seen {
            duration_sum += ((last - s.datetime).num_milliseconds().max(0)) as f64 / 1000.0;
        }
        out.referrer_type_freq[s.ref_type.index()] += 1;
        if !s.ref_host.is_empty() {
            *ref_hosts.entry(s.ref_host.as_str()).or_default() += 1;
        }
        *landing.entry(s.service.as_str()).or_default() += 1;
        let logout = logout_of.get(s.session_id.as_str()).copied().unwrap_or(LogoutType::None);
        out.logout_type_freq[logout.index()] += 1;
        out.per_server.entry(s.server_id).or_default().sessions += 1;
    }

    out.unique_users = users.len() as u64;
    for origin in OriginClass::ALL {
        let i = origin_index(origin);
        origin_stats[i].users = origin_users[i].len() as u64;
        out.set_origin(origin, &origin_stats[i]);
    }
    out.pageviews_per_session = ratio(out.pageviews_total, out.sessions_total);
    out.pageviews_per_user = ratio(out.pageviews_total, out.unique_users);
    out.sessions_per_user = ratio(out.sessions_total, out.unique_users);

    gen_times.sort_by(f64::total_cmp);
    if !gen_times.is_empty() {
        let n = gen_times.len() as f64;
        out.avg_gen_time_ms = round2(gen_sum / n);
        out.avg_db_delay_ms = round2(db_sum / n);
        out.p95_gen_time_ms = round2(percentile_nearest_rank(&gen_times, 95.0));
        out.max_gen_time_ms = round2(*gen_times.last().unwrap());
    }
    if out.sessions_total > 0 {
        out.avg_session_duration_s = round2(duration_sum / out.sessions_total as f64);
    }

    let hourly: Vec<u64> = out.hourly_by_sex.iter().map(|h| h.iter().sum()).collect();
    if let Some((h, n)) = hourly.iter().enumerate().filter(|(_, n)| **n > 0).max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))) {
        out.peak_hour = h as u32;
        out.peak_hour_pageviews = *n;
    }

    out.distinct_ips = ip_sessions.len() as u64;
    out.multi_session_ip_count = ip_sessions.values().filter(|n| **n >= 2).count() as u64;
    out.distinct_services = services.len() as u64;
    out.active_servers = out.per_server.values().filter(|s| s.pageviews > 0).count() as u64;
    for (server, users) in server_users {
        out.per_server.entry(server).or_default().unique_users = users.len() as u64;
    }

    let mut hosts: Vec<HostCount> = ref_hosts
        .into_iter()
        .map(|(host, sessions)| HostCount {
            host: host.to_string(),
            sessions,
        })
        .collect();
    hosts.sort_by(|a, b| b.sessions.cmp(&a.sessions).then_with(|| a.host.cmp(&b.host)));
    hosts.truncate(TOP_REF_HOSTS);
    out.top_ref_hosts = hosts;

    let mut services: Vec<ServiceCount> = landing
        .into_iter()
        .map(|(service, sessions)| ServiceCount {
            service: service.to_string(),
            sessions,
        })
        .collect();
    services.sort_by(|a, b| b.sessions.cmp(&a.sessions).then_with(|| a.service.cmp(&b.service)));
    out.landing_service_freq = services;
    out
}

fn origin_index(o: OriginClass) -> usize {
    match o {
        OriginClass::InHouse => 0,
        OriginClass::InCountry => 1,
        OriginClass::OutCountry => 2,
    }
}

pub fn analytics_file_name(date: NaiveDate) -> String {
    format!("analytics-{date}.json")
}

/// Writes (or replaces) the day's canonical JSON file.
pub fn write_analytics(dir: &Path, record: &AnalyticsDay) -> Result<PathBuf, ExtractError> {
    fs::create_dir_all(dir)?;
    let path = dir.join(analytics_file_name(record.date));
    let tmp = dir.join(format!(".{}.tmp", analytics_file_name(record.date)));
    fs::write(&tmp, record.to_canonical_json())?;
    fs::rename(&tmp, &path)?;
    Ok(path)
}

pub fn read_analytics(dir: &Path, date: NaiveDate) -> Result<AnalyticsDay, ExtractError> {
    let path = dir.join(analytics_file_name(date));
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(ExtractError::NotFound(date)),
        Err(e) => return Err(e.into()),
    };
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests;
