//! Virtual-time web-farm simulation.
//!
//! A trace (visitors, sessions, pageview times) is drawn from the config's
//! seed. Server assignment uses a separate random stream, so changing the
//! balancing policy never changes the trace itself.

use std::collections::{BTreeMap, HashSet};
use std::net::Ipv4Addr;
use std::sync::Arc;

use cawal_core::capture::{AppData, AuthUser, CaptureConfig, RequestContext, Tracker};
use cawal_core::clock::{EngineTz, ManualClock, Timestamp};
use cawal_core::extract::{percentile_nearest_rank, round2, ExtractConfig};
use cawal_core::logstore::{LogStore, StagedDay};
use cawal_core::model::{GeoTable, ProfileDirectory, ReferrerConfig, Sex, UserProfile};
use cawal_core::records::SessionRecord;
use cawal_core::session_store::{SessionPolicy, SessionStore};
use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, LbPolicy, Mode, SimConfig, MAIN_SITE, OWN_DOMAIN};

pub const IN_HOUSE_CIDR: &str = "193.140.0.0/16";

/// Longest think time kept inside one session: one second under the idle warning.
const MAX_THINK_S: f64 = 25.0 * 60.0 - 1.0;
/// Minimum gap between two sessions of one visitor, past the idle timeout.
const SESSION_SPACING: i64 = 31 * 60;
const LB_STREAM: u64 = 0x6c62_5f73_7472_6561;

pub const USER_AGENTS: [&str; 6] = [
    "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/114.0.0.0 Safari/537.36",
    "Mozilla/5.0 (Windows NT 10.0; Win64; x64; rv:115.0) Gecko/20100101 Firefox/115.0",
    "Mozilla/5.0 (Macintosh; Intel Mac OS X 10_15_7) AppleWebKit/605.1.15 (KHTML, like Gecko) Version/16.5 Safari/605.1.15",
    "Mozilla/5.0 (Linux; Android 13; SM-A536B) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/114.0.0.0 Mobile Safari/537.36",
    "Mozilla/5.0 (iPhone; CPU iPhone OS 16_5 like Mac OS X) AppleWebKit/605.1.15 (KHTML, like Gecko) Version/16.5 Mobile/15E148 Safari/604.1",
    "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/114.0.0.0 Safari/537.36 Edg/114.0.1823.43",
];

pub const REFERRER_URLS: [&str; 6] = [
    "",
    "https://www.example.edu/",
    "https://portal.example.edu/news",
    "https://news.example.org/story/41",
    "https://www.google.com/search?q=example+university",
    "https://t.co/x1",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Visitor {
    /// 0 for guests.
    pub user_id: u64,
    pub sex: Sex,
    /// 0 in-house, 1 in-country, 2 out-country.
    pub origin: usize,
    pub ip: Ipv4Addr,
    pub ua: usize,
}

impl Visitor {
    pub fn is_guest(&self) -> bool {
        self.user_id == 0
    }

    /// Same identity the extractor derives from a session row.
    pub fn user_key(&self) -> String {
        if self.is_guest() {
            format!("g:{}|{}", self.ip, self.ua)
        } else {
            format!("u:{}", self.user_id)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSession {
    pub visitor: usize,
    pub ref_type: usize,
    pub service: usize,
    /// Pageview times in microseconds since the simulated day's midnight (UTC).
    pub times_us: Vec<i64>,
    /// Page generation times, one per pageview.
    pub service_ms: Vec<f64>,
    pub explicit_logout: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Request {
    pub time_us: i64,
    pub session: usize,
    pub page: usize,
    pub server: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trace {
    pub date: NaiveDate,
    pub visitors: Vec<Visitor>,
    pub sessions: Vec<SimSession>,
    /// All pageview requests in processing order.
    pub requests: Vec<Request>,
}

fn visitor_ip(origin: usize, v: u32) -> Ipv4Addr {
    let base = match origin {
        0 => (u32::from(Ipv4Addr::new(193, 140, 0, 0)), 1 << 16),
        1 => (u32::from(Ipv4Addr::new(78, 160, 0, 0)), 1 << 21),
        _ => (u32::from(Ipv4Addr::new(8, 0, 0, 0)), 1 << 23),
    };
    Ipv4Addr::from(base.0 + 1 + v % (base.1 - 2))
}

/// Draws the full request trace for `cfg`.
pub fn build_trace(cfg: &SimConfig) -> Result<Trace, ConfigError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hours = WeightedIndex::new(&cfg.hour_profile).expect("validated");
    let sexes = WeightedIndex::new(&cfg.sex_mix).expect("validated");
    let origins = WeightedIndex::new(&cfg.origin_mix).expect("validated");
    let refs = WeightedIndex::new(&cfg.referrer_mix).expect("validated");

    let visitors: Vec<Visitor> = (0..cfg.visitors)
        .map(|v| {
            let guest = rng.random_bool(cfg.guest_share);
            let origin = origins.sample(&mut rng);
            Visitor {
                user_id: if guest { 0 } else { v + 1 },
                sex: if guest { Sex::NotAvailable } else { sex_from(sexes.sample(&mut rng)) },
                origin,
                ip: visitor_ip(origin, v as u32),
                ua: rng.random_range(0..USER_AGENTS.len()),
            }
        })
        .collect();

    let mut sessions: Vec<SimSession> = (0..cfg.total_sessions)
        .map(|_| {
            let visitor = rng.random_range(0..visitors.len());
            let start_s = hours.sample(&mut rng) as i64 * 3600 + rng.random_range(0..3600);
            let len = cfg.session_length_dist.sample(&mut rng).round().max(1.0) as usize;
            let mut t = start_s * 1_000_000;
            let mut times_us = Vec::with_capacity(len);
            let mut service_ms = Vec::with_capacity(len);
            for k in 0..len {
                if k > 0 {
                    let think = cfg.think_time_dist.sample(&mut rng).min(MAX_THINK_S);
                    t += (think * 1e6).round() as i64;
                }
                times_us.push(t);
                service_ms.push(round2(cfg.service_time_dist.sample(&mut rng)));
            }
            let visitor_is_guest = visitors[visitor].is_guest();
            SimSession {
                visitor,
                ref_type: refs.sample(&mut rng),
                service: rng.random_range(0..cfg.services.len()),
                times_us,
                service_ms,
                explicit_logout: !visitor_is_guest && rng.random_bool(0.3),
            }
        })
        .collect();

    // one visitor's sessions never overlap: push later ones past the timeout
    let mut by_visitor: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in sessions.iter().enumerate() {
        by_visitor.entry(s.visitor).or_default().push(i);
    }
    for ids in by_visitor.values_mut() {
        ids.sort_by_key(|&i| (sessions[i].times_us[0], i));
        let mut free_from: Option<i64> = None;
        for &i in ids.iter() {
            let s = &mut sessions[i];
            let shift = free_from.map_or(0, |f| (f - s.times_us[0]).max(0));
            for t in &mut s.times_us {
                *t += shift;
            }
            free_from = Some(s.times_us.last().expect("non-empty") + SESSION_SPACING * 1_000_000);
        }
    }

    let mut requests: Vec<Request> = sessions
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.times_us.iter().enumerate().map(move |(k, t)| Request {
                time_us: *t,
                session: i,
                page: k,
                server: 0,
            })
        })
        .collect();
    requests.sort_by_key(|r| (r.time_us, r.session, r.page));
    assign_servers(cfg, &mut requests);
    Ok(Trace {
        date: cfg.date,
        visitors,
        sessions,
        requests,
    })
}

fn sex_from(i: usize) -> Sex {
    match i {
        1 => Sex::Male,
        2 => Sex::Female,
        _ => Sex::NotAvailable,
    }
}

fn assign_servers(cfg: &SimConfig, requests: &mut [Request]) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ LB_STREAM);
    let m = cfg.servers.len();
    match cfg.lb_policy {
        LbPolicy::RoundRobin => {
            for (i, r) in requests.iter_mut().enumerate() {
                r.server = cfg.servers[i % m];
            }
        }
        LbPolicy::Random => {
            for r in requests.iter_mut() {
                r.server = cfg.servers[rng.random_range(0..m)];
            }
        }
        LbPolicy::Weighted => {
            let w = WeightedIndex::new(&cfg.server_weights).expect("validated");
            for r in requests.iter_mut() {
                r.server = cfg.servers[w.sample(&mut rng)];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerReport {
    pub sessions: u64,
    pub pageviews: u64,
    pub unique_users: u64,
    pub pps: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ResponseTimes {
    pub mean_ms: f64,
    pub p90_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
}

impl ResponseTimes {
    pub fn from_samples(mut ms: Vec<f64>) -> Self {
        if ms.is_empty() {
            return Self::default();
        }
        ms.sort_by(f64::total_cmp);
        Self {
            mean_ms: round2(ms.iter().sum::<f64>() / ms.len() as f64),
            p90_ms: round2(percentile_nearest_rank(&ms, 90.0)),
            p95_ms: round2(percentile_nearest_rank(&ms, 95.0)),
            p99_ms: round2(percentile_nearest_rank(&ms, 99.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub mode: Mode,
    pub lb_policy: LbPolicy,
    pub per_server: BTreeMap<u16, ServerReport>,
    pub totals: ServerReport,
    pub requests_to_log_sink: u64,
    /// Modelled pageviews per second with every server busy.
    pub throughput_rps: f64,
    pub response_time: ResponseTimes,
}

impl SimReport {
    pub fn to_json(&self) -> Vec<u8> {
        let value = serde_json::to_value(self).expect("report serializes");
        serde_json::to_vec_pretty(&value).expect("JSON value serializes")
    }
}

pub struct SimOutput {
    pub report: SimReport,
    pub trace: Trace,
    /// Rotated log-store days; filled in server-side mode only.
    pub staged: BTreeMap<NaiveDate, StagedDay>,
    pub profiles: ProfileDirectory,
    pub extract_config: ExtractConfig,
}

impl SimOutput {
    /// Every emitted log record as NDJSON, day by day.
    pub fn log_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for day in self.staged.values() {
            for s in &day.sessions {
                serde_json::to_writer(&mut out, s).expect("record serializes");
                out.push(b'\n');
            }
            for p in &day.pageviews {
                serde_json::to_writer(&mut out, p).expect("record serializes");
                out.push(b'\n');
            }
            for c in &day.closes {
                serde_json::to_writer(&mut out, c).expect("record serializes");
                out.push(b'\n');
            }
        }
        out
    }

    pub fn session_records(&self) -> impl Iterator<Item = &SessionRecord> {
        self.staged.values().flat_map(|d| d.sessions.iter())
    }
}

pub fn profiles_for(trace: &Trace) -> ProfileDirectory {
    ProfileDirectory::new(trace.visitors.iter().filter(|v| !v.is_guest()).map(|v| UserProfile {
        user_id: v.user_id,
        username: format!("user{}", v.user_id),
        sex: v.sex,
    }))
}

pub fn extract_config() -> ExtractConfig {
    ExtractConfig {
        in_house: vec![IN_HOUSE_CIDR.parse().expect("valid cidr")],
        home_country: "TR".into(),
        ..ExtractConfig::default()
    }
}

/// Counts per server, from the trace alone.
pub fn tally(trace: &Trace) -> (BTreeMap<u16, ServerReport>, ServerReport) {
    let mut per_server: BTreeMap<u16, ServerReport> = BTreeMap::new();
    let mut server_users: BTreeMap<u16, HashSet<String>> = BTreeMap::new();
    let mut users: HashSet<String> = HashSet::new();
    for r in &trace.requests {
        let key = trace.visitors[trace.sessions[r.session].visitor].user_key();
        let s = per_server.entry(r.server).or_default();
        s.pageviews += 1;
        if r.page == 0 {
            s.sessions += 1;
        }
        server_users.entry(r.server).or_default().insert(key.clone());
        users.insert(key);
    }
    for (id, s) in per_server.iter_mut() {
        s.unique_users = server_users[id].len() as u64;
        s.pps = ratio(s.pageviews, s.sessions);
    }
    let totals = ServerReport {
        sessions: trace.sessions.len() as u64,
        pageviews: trace.requests.len() as u64,
        unique_users: users.len() as u64,
        pps: ratio(trace.requests.len() as u64, trace.sessions.len() as u64),
    };
    (per_server, totals)
}

fn ratio(a: u64, b: u64) -> f64 {
    cawal_core::extract::ratio(a, b)
}

fn timestamp(date: NaiveDate, us: i64) -> Timestamp {
    EngineTz::utc().start_of(date) + Duration::microseconds(us)
}

pub fn request_context(cfg: &SimConfig, trace: &Trace, r: &Request) -> RequestContext {
    let s = &trace.sessions[r.session];
    let v = &trace.visitors[s.visitor];
    let service = &cfg.services[s.service];
    RequestContext {
        ip: v.ip,
        user_agent: USER_AGENTS[v.ua].to_string(),
        referrer: if r.page == 0 {
            REFERRER_URLS[s.ref_type].to_string()
        } else {
            format!("https://{service}.{OWN_DOMAIN}/page/{}", r.page - 1)
        },
        url: format!("https://{service}.{OWN_DOMAIN}/page/{}", r.page),
        host: format!("{service}.{OWN_DOMAIN}"),
        service: service.clone(),
        server_id: r.server,
        user: (!v.is_guest()).then(|| AuthUser {
            user_id: v.user_id,
            username: format!("user{}", v.user_id),
        }),
        session_token: Some(format!("sess{}", r.session)),
        forwarded_for: None,
        accept_language: "tr-TR,tr;q=0.9,en;q=0.8".into(),
        timestamp: timestamp(trace.date, r.time_us),
    }
}

pub fn new_tracker(seed: u64, clock: Arc<ManualClock>) -> (Tracker, Arc<LogStore>) {
    let log = Arc::new(LogStore::in_memory(EngineTz::utc()));
    let tracker = Tracker::new(
        Arc::new(SessionStore::with_seed(SessionPolicy::default(), seed)),
        log.clone(),
        CaptureConfig::new(ReferrerConfig::with_bundled_tables(MAIN_SITE, &[OWN_DOMAIN]), GeoTable::bundled()),
        clock,
    );
    (tracker, log)
}

/// Runs the server-side capture path over the trace in virtual time and
/// returns the rotated days plus the number of log-store interactions.
fn capture_trace(cfg: &SimConfig, trace: &Trace) -> (BTreeMap<NaiveDate, StagedDay>, u64) {
    let start = timestamp(trace.date, 0);
    let clock = Arc::new(ManualClock::new(start));
    let (tracker, log) = new_tracker(cfg.seed, clock.clone());
    let sweep_every = Duration::minutes(5);
    let mut next_sweep = start + sweep_every;
    let mut last = start;
    for r in &trace.requests {
        let ctx = request_context(cfg, trace, r);
        while ctx.timestamp >= next_sweep {
            clock.set(next_sweep);
            tracker.sweep(next_sweep).expect("sweep");
            tracker.sessions().purge_closed_before(next_sweep - Duration::hours(1));
            next_sweep += sweep_every;
        }
        clock.set(ctx.timestamp);
        let s = &trace.sessions[r.session];
        let handle = tracker.begin_request(&ctx).expect("simulated visitors are never banned");
        let done = ctx.timestamp + Duration::microseconds((s.service_ms[r.page] * 1000.0).round() as i64);
        let app = AppData {
            header: format!("{} page {}", cfg.services[s.service], r.page),
            db_delay_ms: round2(s.service_ms[r.page] * 0.2),
            ..AppData::default()
        };
        tracker.finalize_request_at(&handle, app, done).expect("finalize");
        last = last.max(done);
        if s.explicit_logout && r.page + 1 == s.times_us.len() {
            tracker.logout(handle.session_id(), done).expect("logout");
        }
    }
    let end = last + Duration::minutes(31);
    clock.set(end);
    tracker.sweep(end).expect("sweep");
    let today = EngineTz::utc().date_of(end) + Duration::days(1);
    let mut staged = BTreeMap::new();
    for date in log.live_dates() {
        let h = log.rotate_day(date, today).expect("rotation of a past day");
        staged.insert(date, h.day().clone());
    }
    (staged, tracker.counters().log_interactions)
}

/// Modelled response time of one pageview.
fn response_ms(cfg: &SimConfig, service_ms: f64) -> f64 {
    let c = &cfg.cost_model;
    match cfg.mode {
        Mode::None => service_ms,
        Mode::ServerSide => service_ms + c.capture_ms,
        Mode::ClientEmulation => {
            service_ms + 2.0 * c.round_trip_ms + (c.script_bytes + c.beacon_bytes) as f64 / c.bytes_per_ms
        }
    }
}

pub fn run_simulation(cfg: &SimConfig) -> Result<SimOutput, ConfigError> {
    let trace = build_trace(cfg)?;
    let (per_server, totals) = tally(&trace);

    let (staged, log_requests) = match cfg.mode {
        Mode::ServerSide => capture_trace(cfg, &trace),
        Mode::None => (BTreeMap::new(), 0),
        Mode::ClientEmulation => (BTreeMap::new(), trace.requests.len() as u64 * Mode::ClientEmulation.log_requests_per_pageview()),
    };
    let samples: Vec<f64> = trace
        .requests
        .iter()
        .map(|r| response_ms(cfg, trace.sessions[r.session].service_ms[r.page]))
        .collect();
    let response_time = ResponseTimes::from_samples(samples);
    let throughput_rps = if response_time.mean_ms > 0.0 {
        round2(cfg.servers.len() as f64 * 1000.0 / response_time.mean_ms)
    } else {
        0.0
    };
    let report = SimReport {
        mode: cfg.mode,
        lb_policy: cfg.lb_policy,
        per_server,
        totals,
        requests_to_log_sink: log_requests,
        throughput_rps,
        response_time,
    };
    Ok(SimOutput {
        report,
        profiles: profiles_for(&trace),
        trace,
        staged,
        extract_config: extract_config(),
    })
}
