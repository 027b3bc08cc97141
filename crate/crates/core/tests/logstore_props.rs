use std::collections::{BTreeMap, HashMap, HashSet};
use std::net::Ipv4Addr;
use std::sync::Arc;

use cawal_core::clock::{EngineTz, ManualClock, Timestamp};
use cawal_core::extract::{extract_day, ExtractConfig, JobLog};
use cawal_core::logstore::{LogError, LogStore};
use cawal_core::model::ProfileDirectory;
use cawal_core::records::{PageviewRecord, SessionClose, SessionRecord};
use cawal_core::session_store::LogoutType;
use chrono::{DateTime, Duration, NaiveDate, Utc};
use proptest::prelude::*;

fn t0() -> Timestamp {
    DateTime::parse_from_rfc3339("2018-03-14T00:00:00Z").unwrap().with_timezone(&Utc)
}

#[derive(Debug, Clone)]
struct TraceSession {
    start_min: i64,
    gaps_min: Vec<i64>,
    close: bool,
}

fn trace() -> impl Strategy<Value = Vec<TraceSession>> {
    prop::collection::vec(
        (
            // clustered late in the day so many sessions cross midnight
            prop_oneof![0i64..4320, 1380i64..1440, 2820i64..2880],
            prop::collection::vec(0i64..29, 0..8),
            any::<bool>(),
        )
            .prop_map(|(start_min, gaps_min, close)| TraceSession { start_min, gaps_min, close }),
        1..40,
    )
}

enum Write {
    Session(SessionRecord),
    Pageview(PageviewRecord),
    Close(SessionClose),
}

/// Every write of the trace, in time order.
fn writes(trace: &[TraceSession]) -> Vec<(Timestamp, Write)> {
    let mut out = Vec::new();
    for (i, s) in trace.iter().enumerate() {
        let id = format!("s{i:03}");
        let start = t0() + Duration::minutes(s.start_min);
        let rec = SessionRecord::blank(&id, start, Ipv4Addr::new(10, 0, 0, (i % 200) as u8));
        out.push((start, Write::Session(rec)));
        let mut t = start;
        out.push((t, Write::Pageview(PageviewRecord::blank(&id, 1, t))));
        for (k, g) in s.gaps_min.iter().enumerate() {
            t += Duration::minutes(*g);
            out.push((t, Write::Pageview(PageviewRecord::blank(&id, k as u64 + 2, t))));
        }
        if s.close {
            out.push((
                t,
                Write::Close(SessionClose {
                    session_id: id.clone(),
                    ended_at: t,
                    logout_type: LogoutType::Explicit,
                }),
            ));
        }
    }
    out.sort_by_key(|(t, w)| {
        let rank = match w {
            Write::Session(_) => 0,
            Write::Pageview(_) => 1,
            Write::Close(_) => 2,
        };
        (*t, rank)
    });
    out
}

#[derive(Default, Debug, PartialEq)]
struct Acked {
    sessions: usize,
    pageviews: usize,
    closes: usize,
}

/// Replays writes, rotating each day `lag_min` minutes after its midnight.
fn replay(store: &LogStore, trace: &[TraceSession], lag_min: i64) -> (Acked, Vec<NaiveDate>) {
    let tz = EngineTz::utc();
    let mut acked = Acked::default();
    let mut rotated = Vec::new();
    let mut next_rotation = tz.start_of(tz.date_of(t0())) + Duration::days(1) + Duration::minutes(lag_min);
    for (t, w) in writes(trace) {
        while t >= next_rotation {
            let today = tz.date_of(next_rotation);
            let day = today - Duration::days(1);
            store.rotate_day(day, today).unwrap();
            rotated.push(day);
            next_rotation += Duration::days(1);
        }
        let res = match w {
            Write::Session(r) => store.append_session(r).map(|_| acked.sessions += 1),
            Write::Pageview(r) => store.append_pageview(r).map(|_| acked.pageviews += 1),
            Write::Close(r) => store.append_close(r).map(|_| acked.closes += 1),
        };
        match res {
            Ok(()) | Err(LogError::RotationRace(_)) => {}
            Err(e) => panic!("{e}"),
        }
    }
    (acked, rotated)
}

fn counts(store: &LogStore) -> (usize, usize, usize, usize) {
    let (mut s, mut p, mut c, mut forced) = (0, 0, 0, 0);
    for d in store.staged_dates() {
        let h = store.staging(d).unwrap();
        s += h.day().sessions.len();
        p += h.day().pageviews.len();
        c += h.day().closes.len();
        forced += h
            .day()
            .closes
            .iter()
            .filter(|x| x.logout_type == LogoutType::WindowCloseTimeout)
            .count();
    }
    for d in store.live_dates() {
        let (ls, lp, lc) = store.live_counts(d);
        s += ls;
        p += lp;
        c += lc;
    }
    (s, p, c, forced)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn rotation_conserves_records(trace in trace(), lag in 0i64..60) {
        let store = LogStore::in_memory(EngineTz::utc());
        let (acked, _) = replay(&store, &trace, lag);
        let (s, p, c, forced) = counts(&store);
        prop_assert_eq!(s, acked.sessions);
        prop_assert_eq!(p, acked.pageviews);
        prop_assert_eq!(c, acked.closes + forced);

        // every staged session has exactly one close row
        for d in store.staged_dates() {
            let h = store.staging(d).unwrap();
            let mut per: HashMap<&str, usize> = HashMap::new();
            for x in &h.day().closes {
                *per.entry(x.session_id.as_str()).or_default() += 1;
            }
            for sess in &h.day().sessions {
                prop_assert_eq!(per.get(sess.session_id.as_str()).copied(), Some(1));
            }
        }
    }

    #[test]
    fn days_never_split_a_session(trace in trace()) {
        let store = LogStore::in_memory(EngineTz::utc());
        // rotate late enough that no write is refused
        let (acked, rotated) = replay(&store, &trace, 240);
        let total_pageviews: usize = trace.iter().map(|s| s.gaps_min.len() + 1).sum();
        prop_assert_eq!(acked.pageviews, total_pageviews);

        let tz = EngineTz::utc();
        let mut owner: HashMap<String, NaiveDate> = HashMap::new();
        let mut extracted_pageviews = 0;
        for d in rotated {
            let h = store.staging(d).unwrap();
            let rec = extract_day(
                &h,
                d,
                &ProfileDirectory::default(),
                &ExtractConfig::default(),
                &JobLog::in_memory(Arc::new(ManualClock::new(t0()))),
            )
            .unwrap();
            extracted_pageviews += rec.pageviews_total as usize;
            prop_assert!(rec.invariant_violations().is_empty());
            for p in &h.day().pageviews {
                let prev = owner.insert(p.session_id.clone(), d);
                prop_assert!(prev.is_none() || prev == Some(d), "session {} in two days", p.session_id);
            }
            for s in &h.day().sessions {
                prop_assert_eq!(tz.date_of(s.datetime), d);
            }
        }
        let unrotated: usize = store.live_dates().iter().map(|d| store.live_counts(*d).1).sum();
        prop_assert_eq!(extracted_pageviews + unrotated, total_pageviews);
    }
}

#[test]
fn session_crossing_midnight_stays_in_start_day() {
    let store = LogStore::in_memory(EngineTz::utc());
    let start = t0() + Duration::minutes(23 * 60 + 50);
    store.append_session(SessionRecord::blank("x", start, Ipv4Addr::new(10, 0, 0, 1))).unwrap();
    for (i, m) in [0, 10, 20, 30].iter().enumerate() {
        let t = start + Duration::minutes(*m);
        store.append_pageview(PageviewRecord::blank("x", i as u64 + 1, t)).unwrap();
    }
    let d14: NaiveDate = "2018-03-14".parse().unwrap();
    assert!(store.live_dates() == vec![d14]);
    let h = store.rotate_day(d14, d14 + Duration::days(1)).unwrap();
    assert_eq!(h.day().pageviews.len(), 4);
    assert_eq!(h.day().closes[0].ended_at, start + Duration::minutes(30));
}

#[test]
fn reopen_preserves_acknowledged_appends() {
    let trace: Vec<TraceSession> = (0..30)
        .map(|i| TraceSession {
            start_min: i * 97 % 4000,
            gaps_min: vec![3, 7, 11][..(i as usize % 4).min(3)].to_vec(),
            close: i % 2 == 0,
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let (before, staged_before) = {
        let store = LogStore::open(dir.path(), EngineTz::utc()).unwrap();
        replay(&store, &trace, 30);
        let staged: BTreeMap<NaiveDate, _> = store
            .staged_dates()
            .into_iter()
            .map(|d| (d, store.staging(d).unwrap().day().clone()))
            .collect();
        (counts(&store), staged)
    };
    let store = LogStore::open(dir.path(), EngineTz::utc()).unwrap();
    assert_eq!(counts(&store), before);
    for (d, day) in staged_before {
        assert_eq!(store.staging(d).unwrap().day(), &day);
    }
    // sequence numbers continue after the reopened records
    let live: HashSet<NaiveDate> = store.live_dates().into_iter().collect();
    if let Some(d) = live.iter().next() {
        let (s, _, _) = store.live_counts(*d);
        let t = EngineTz::utc().start_of(*d) + Duration::hours(1);
        let seq = store.append_session(SessionRecord::blank("late", t, Ipv4Addr::new(10, 9, 9, 9))).unwrap();
        assert_eq!(seq as usize, s + 1);
    }
}
