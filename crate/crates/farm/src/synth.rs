//! Random staged days and raw event streams with awkward edge cases, for
//! oracle comparisons.

use std::net::Ipv4Addr;

use cawal_core::clock::{EngineTz, Timestamp};
use cawal_core::extract::ExtractConfig;
use cawal_core::logstore::StagedDay;
use cawal_core::model::{BrowserType, ProfileDirectory, RefType, Sex, UserProfile};
use cawal_core::records::{PageviewRecord, SessionClose, SessionRecord};
use cawal_core::session_store::LogoutType;
use cawal_core::sessionize::RawEvent;
use chrono::{Duration, NaiveDate};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct SynthDay {
    pub date: NaiveDate,
    pub day: StagedDay,
    pub profiles: ProfileDirectory,
    pub config: ExtractConfig,
}

const REF_TYPES: [RefType; 6] = [
    RefType::Direct,
    RefType::MainSite,
    RefType::Subdomain,
    RefType::External,
    RefType::SearchEngine,
    RefType::Social,
];
const LOGOUTS: [LogoutType; 4] = [
    LogoutType::None,
    LogoutType::Explicit,
    LogoutType::WindowCloseTimeout,
    LogoutType::Kicked,
];
const BROWSER_TYPES: [BrowserType; 4] = [BrowserType::Unknown, BrowserType::Desktop, BrowserType::Mobile, BrowserType::Bot];
const ERRORS: [i32; 8] = [0, 0, 0, 0, 401, 403, 404, 500];
const COUNTRIES: [&str; 5] = ["TR", "TR", "US", "DE", "--"];
const SERVICES: [&str; 4] = ["www", "obs", "lms", "mail"];

/// Roughly `events` rows spread over the target day and its neighbours.
pub fn synth_day(seed: u64, events: usize) -> SynthDay {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let date = NaiveDate::from_ymd_opt(2018, 3, 14).expect("valid date") + Duration::days(rng.random_range(0..400));
    let tz = if rng.random_bool(0.5) {
        EngineTz::utc()
    } else {
        EngineTz::from_offset_minutes(180).expect("valid offset")
    };
    let midnight = tz.start_of(date);
    let users = rng.random_range(1..40u64);
    let mut profile_rows = Vec::new();
    for id in 1..=users {
        if rng.random_bool(0.8) {
            profile_rows.push(UserProfile {
                user_id: id,
                username: format!("user{id}"),
                sex: [Sex::NotAvailable, Sex::Male, Sex::Female][rng.random_range(0..3)],
            });
        }
    }
    let profiles = ProfileDirectory::new(profile_rows);
    let host_pool = rng.random_range(1..80);

    let mut day = StagedDay::default();
    let n_sessions = (events / 4).max(1);
    for i in 0..n_sessions {
        let id = format!("s{i:05}");
        // about one session in six belongs to a neighbouring day
        let offset_s = match rng.random_range(0..12) {
            0 => rng.random_range(-3 * 3600..0),
            1 => rng.random_range(86_400..86_400 + 3 * 3600),
            _ => rng.random_range(0..86_400),
        };
        let start: Timestamp = midnight + Duration::seconds(offset_s) + Duration::microseconds(rng.random_range(0..1_000_000));
        let ip = Ipv4Addr::new(
            *[193u8, 78, 8, 10].choose(&mut rng).expect("non-empty"),
            140,
            rng.random_range(0..3),
            rng.random_range(1..20),
        );
        let mut s = SessionRecord::blank(&id, start, ip);
        if rng.random_bool(0.6) {
            s.user_id = rng.random_range(1..=users);
            s.username = format!("user{}", s.user_id);
        }
        s.os_name = ["Windows", "Android", ""].choose(&mut rng).expect("non-empty").to_string();
        s.browser_name = ["Chrome", "Firefox"].choose(&mut rng).expect("non-empty").to_string();
        s.browser_version = rng.random_range(100..103).to_string();
        s.browser_type = *BROWSER_TYPES.choose(&mut rng).expect("non-empty");
        s.country = COUNTRIES.choose(&mut rng).expect("non-empty").to_string();
        s.cookie_check = rng.random_bool(0.8);
        s.ref_type = *REF_TYPES.choose(&mut rng).expect("non-empty");
        if s.ref_type != RefType::Direct {
            s.ref_host = format!("h{}.example.org", rng.random_range(0..host_pool));
        }
        s.server_id = rng.random_range(1..8);
        s.service = SERVICES.choose(&mut rng).expect("non-empty").to_string();
        day.sessions.push(s);

        let pages = rng.random_range(0..7);
        let mut t = start;
        for seq in 1..=pages {
            let mut p = PageviewRecord::blank(&id, seq, t);
            p.gen_time_ms = match rng.random_range(0..10) {
                0 => 1000.0,
                1 => rng.random_range(1000.0..3000.0),
                2 => 50.0,
                _ => (rng.random_range(0.0..400.0f64) * 100.0).round() / 100.0,
            };
            p.db_delay_ms = (rng.random_range(0.0..50.0f64) * 1000.0).round() / 1000.0;
            p.error_code = *ERRORS.choose(&mut rng).expect("non-empty");
            p.server_id = if rng.random_bool(0.7) { day.sessions[i].server_id } else { rng.random_range(1..9) };
            p.service = SERVICES.choose(&mut rng).expect("non-empty").to_string();
            day.pageviews.push(p);
            t += Duration::seconds(rng.random_range(0..1800));
        }
        for _ in 0..rng.random_range(0..3) {
            day.closes.push(SessionClose {
                session_id: id.clone(),
                ended_at: t,
                logout_type: *LOGOUTS.choose(&mut rng).expect("non-empty"),
            });
        }
    }
    // pageviews and closes whose session row is missing
    for k in 0..rng.random_range(0..events / 20 + 1) {
        let t = midnight + Duration::seconds(rng.random_range(0..86_400));
        let mut p = PageviewRecord::blank(format!("orphan{k}"), 1, t);
        p.gen_time_ms = 10.0;
        day.pageviews.push(p);
        day.closes.push(SessionClose {
            session_id: format!("orphan{k}"),
            ended_at: t,
            logout_type: LogoutType::Kicked,
        });
    }
    // staging keeps write order, which interleaves sessions
    day.pageviews.sort_by_key(|p| p.datetime);

    let config = ExtractConfig {
        tz,
        in_house: vec!["193.140.0.0/22".parse().expect("valid cidr")],
        home_country: "TR".into(),
        slow_page_ms: 1000.0,
    };
    SynthDay {
        date,
        day,
        profiles,
        config,
    }
}

/// `n` raw events from a handful of visitors, with gaps clustered around the
/// 30-minute boundary and occasional account switches.
pub fn synth_events(seed: u64, n: usize) -> Vec<RawEvent> {
    let visitors = ChaCha8Rng::seed_from_u64(seed).random_range(1..=(n / 5).max(1));
    synth_events_for(seed, n, visitors)
}

/// Like [`synth_events`] with a fixed number of visitors.
pub fn synth_events_for(seed: u64, n: usize, visitors: usize) -> Vec<RawEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let visitors = visitors.max(1);
    let base = EngineTz::utc().start_of(NaiveDate::from_ymd_opt(2018, 3, 14).expect("valid date"));
    let mut clock: Vec<Timestamp> = vec![base; visitors];
    let mut events = Vec::with_capacity(n);
    for _ in 0..n {
        let v = rng.random_range(0..visitors);
        let gap = match rng.random_range(0..6) {
            0 => Duration::minutes(30),
            1 => Duration::minutes(30) + Duration::microseconds(1),
            2 => Duration::minutes(30) - Duration::microseconds(1),
            3 => Duration::zero(),
            _ => Duration::seconds(rng.random_range(0..4000)),
        };
        clock[v] += gap;
        let token = match v % 3 {
            0 => Some(format!("tok{v}")),
            1 if rng.random_bool(0.1) => Some(String::new()),
            _ => None,
        };
        let user_id = match v % 4 {
            0 | 1 => Some(v as u64 + rng.random_range(0..2) * 1000),
            _ => None,
        };
        events.push(RawEvent {
            timestamp: clock[v],
            ip: Ipv4Addr::new(10, 0, (v / 250) as u8, (v % 250) as u8),
            ua: format!("agent-{}", v % 7),
            url: format!("/p/{}", rng.random_range(0..50)),
            referrer: String::new(),
            token,
            user_id,
        });
    }
    // input order is arrival order, not time order
    for i in (1..events.len()).rev() {
        if rng.random_bool(0.2) {
            let j = rng.random_range(0..=i);
            events.swap(i, j);
        }
    }
    events
}
