use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};

use super::*;
use crate::capture::{AppData, AuthUser, CaptureConfig, RequestContext, Tracker};
use crate::clock::{Clock, ManualClock, Timestamp};
use crate::logstore::{LogStore, StagedDay};
use crate::model::{GeoTable, RefType, ReferrerConfig, Sex, UserProfile};
use crate::records::SessionClose;
use crate::session_store::{SessionPolicy, SessionStore};
use crate::warehouse::Warehouse;

fn at(s: &str) -> Timestamp {
    DateTime::parse_from_rfc3339(s).unwrap().with_timezone(&Utc)
}

fn date(s: &str) -> NaiveDate {
    s.parse().unwrap()
}

fn session(id: &str, start: &str, user: u64, ip: &str) -> SessionRecord {
    let mut s = SessionRecord::blank(id, at(start), ip.parse().unwrap());
    s.user_id = user;
    s.server_id = 1;
    s.service = "www".into();
    s.country = "TR".into();
    s.cookie_check = true;
    s.browser_type = BrowserType::Desktop;
    s
}

fn pageview(id: &str, seq: u64, t: &str, gen: f64) -> PageviewRecord {
    let mut p = PageviewRecord::blank(id, seq, at(t));
    p.gen_time_ms = gen;
    p.server_id = 1;
    p.service = "www".into();
    p
}

fn staging(date_s: &str, day: StagedDay) -> StagingHandle {
    StagingHandle::from_records(date(date_s), day)
}

fn job_log() -> JobLog {
    JobLog::in_memory(Arc::new(ManualClock::new(at("2018-03-15T01:00:00Z"))))
}

fn extract(day: StagedDay, d: &str) -> AnalyticsDay {
    extract_day(&staging(d, day), date(d), &ProfileDirectory::default(), &ExtractConfig::default(), &job_log()).unwrap()
}

#[test]
fn empty_staging_gives_zero_record() {
    let r = extract(StagedDay::default(), "2018-03-14");
    assert_eq!(r, AnalyticsDay::empty(date("2018-03-14")));
    assert!(r.invariant_violations().is_empty());
    assert_eq!(r.hourly_by_sex.len(), 24);
}

#[test]
fn midnight_session_counts_for_start_day() {
    let day = StagedDay {
        sessions: vec![session("a", "2018-03-14T23:50:00Z", 0, "10.0.0.1")],
        pageviews: vec![
            pageview("a", 1, "2018-03-14T23:50:00Z", 10.0),
            pageview("a", 2, "2018-03-15T00:05:00Z", 10.0),
            pageview("a", 3, "2018-03-15T00:20:00Z", 10.0),
        ],
        closes: vec![],
    };
    let attributed = attribute_day(&day.sessions, EngineTz::utc());
    assert_eq!(attributed["a"], date("2018-03-14"));
    let r = extract(day, "2018-03-14");
    assert_eq!((r.sessions_total, r.pageviews_total), (1, 3));
    assert_eq!(r.hourly_by_sex[23][0], 1);
    assert_eq!(r.hourly_by_sex[0][0], 2);
    assert_eq!(r.avg_session_duration_s, 1800.0);
    // peak hour ties resolve to the earliest hour
    assert_eq!((r.peak_hour, r.peak_hour_pageviews), (0, 2));
}

#[test]
fn hand_computed_day() {
    let mut s1 = session("a", "2018-03-14T09:00:00Z", 7, "193.140.1.1");
    s1.ref_type = RefType::SearchEngine;
    s1.ref_host = "www.google.com".into();
    let mut s2 = session("b", "2018-03-14T10:00:00Z", 0, "193.140.1.1");
    s2.ref_type = RefType::Social;
    s2.ref_host = "t.co".into();
    s2.country = "US".into();
    s2.server_id = 2;
    s2.service = "obs".into();
    s2.cookie_check = false;
    s2.browser_type = BrowserType::Bot;
    let mut s3 = session("c", "2018-03-14T11:00:00Z", 7, "88.230.0.1");
    s3.ref_type = RefType::SearchEngine;
    s3.ref_host = "www.google.com".into();

    let mut slow = pageview("a", 2, "2018-03-14T09:10:00Z", 1500.0);
    slow.error_code = 403;
    let mut obs = pageview("b", 1, "2018-03-14T10:00:00Z", 30.0);
    obs.server_id = 2;
    obs.service = "obs".into();
    obs.error_code = 500;
    let day = StagedDay {
        sessions: vec![s1, s2, s3],
        pageviews: vec![
            pageview("a", 1, "2018-03-14T09:00:00Z", 100.0),
            slow,
            obs,
            pageview("c", 1, "2018-03-14T11:00:00Z", 1000.0),
            pageview("c", 2, "2018-03-14T11:01:00Z", 20.0),
        ],
        closes: vec![SessionClose {
            session_id: "a".into(),
            ended_at: at("2018-03-14T09:10:00Z"),
            logout_type: LogoutType::Explicit,
        }],
    };
    let profiles = ProfileDirectory::new(vec![UserProfile {
        user_id: 7,
        username: "u7".into(),
        sex: Sex::Female,
    }]);
    let cfg = ExtractConfig {
        in_house: vec!["193.140.0.0/16".parse().unwrap()],
        ..Default::default()
    };
    let r = extract_day(&staging("2018-03-14", day), date("2018-03-14"), &profiles, &cfg, &job_log()).unwrap();

    assert_eq!((r.sessions_total, r.pageviews_total, r.unique_users), (3, 5, 2));
    assert_eq!((r.guest_sessions, r.authenticated_sessions), (1, 2));
    assert_eq!(r.origin(OriginClass::InHouse), OriginStats { sessions: 2, pageviews: 3, users: 2 });
    assert_eq!(r.origin(OriginClass::InCountry), OriginStats { sessions: 1, pageviews: 2, users: 1 });
    assert_eq!(r.origin(OriginClass::OutCountry), OriginStats::default());
    assert_eq!(r.in_house_pps, 1.5);
    assert_eq!(r.pageviews_per_session, 1.67);
    assert_eq!(r.pageviews_per_user, 2.5);
    assert_eq!(r.sessions_per_user, 1.5);
    assert_eq!(r.avg_gen_time_ms, 530.0);
    assert_eq!(r.p95_gen_time_ms, 1500.0);
    assert_eq!(r.max_gen_time_ms, 1500.0);
    assert_eq!((r.slow_page_count, r.error_count, r.unauthorized_attempt_count), (1, 2, 1));
    assert_eq!((r.distinct_ips, r.multi_session_ip_count), (2, 1));
    assert_eq!((r.bot_sessions, r.desktop_sessions, r.bounce_sessions, r.cookieless_sessions), (1, 2, 1, 1));
    assert_eq!(r.referrer_type_freq, [0, 0, 0, 0, 2, 1]);
    assert_eq!(r.logout_type_freq, [2, 1, 0, 0]);
    assert_eq!(r.hourly_by_sex[9], [0, 0, 2]);
    assert_eq!(r.hourly_by_sex[10], [1, 0, 0]);
    assert_eq!(
        r.top_ref_hosts,
        vec![
            HostCount { host: "www.google.com".into(), sessions: 2 },
            HostCount { host: "t.co".into(), sessions: 1 },
        ]
    );
    assert_eq!(r.landing_service_freq[0], ServiceCount { service: "www".into(), sessions: 2 });
    assert_eq!(r.per_server[&1], ServerStats { sessions: 2, pageviews: 4, unique_users: 1 });
    assert_eq!(r.per_server[&2], ServerStats { sessions: 1, pageviews: 1, unique_users: 1 });
    assert_eq!((r.distinct_services, r.active_servers), (2, 2));
    assert_eq!(r.avg_session_duration_s, 220.0);
    assert!(r.invariant_violations().is_empty(), "{:?}", r.invariant_violations());
}

#[test]
fn top_hosts_truncated_with_lexicographic_ties() {
    let mut day = StagedDay::default();
    for i in 0..60 {
        let id = format!("s{i}");
        let mut s = session(&id, "2018-03-14T12:00:00Z", 0, "10.0.0.1");
        s.ref_type = RefType::External;
        s.ref_host = format!("h{:02}.example", i % 55);
        day.sessions.push(s);
        day.pageviews.push(pageview(&id, 1, "2018-03-14T12:00:00Z", 1.0));
    }
    let r = extract(day, "2018-03-14");
    assert_eq!(r.top_ref_hosts.len(), TOP_REF_HOSTS);
    assert_eq!(r.top_ref_hosts[0].host, "h00.example");
    assert_eq!(r.top_ref_hosts[4], HostCount { host: "h04.example".into(), sessions: 2 });
    assert_eq!(r.top_ref_hosts[5], HostCount { host: "h05.example".into(), sessions: 1 });
    assert_eq!(r.top_ref_hosts[49].host, "h49.example");
}

#[test]
fn canonical_bytes_are_stable_and_sorted() {
    let build = || StagedDay {
        sessions: vec![session("a", "2018-03-14T09:00:00Z", 3, "10.0.0.1")],
        pageviews: vec![pageview("a", 1, "2018-03-14T09:00:00Z", 12.5)],
        closes: vec![],
    };
    let a = extract(build(), "2018-03-14").to_canonical_json();
    let b = extract(build(), "2018-03-14").to_canonical_json();
    assert_eq!(a, b);
    let text = String::from_utf8(a.clone()).unwrap();
    assert!(text.find("\"active_servers\"").unwrap() < text.find("\"date\"").unwrap());
    let back: AnalyticsDay = serde_json::from_slice(&a).unwrap();
    assert_eq!(back.to_canonical_json(), a);
}

#[test]
fn write_and_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let r = extract(StagedDay::default(), "2018-03-14");
    let path = write_analytics(dir.path(), &r).unwrap();
    assert!(path.ends_with("analytics-2018-03-14.json"));
    assert_eq!(read_analytics(dir.path(), r.date).unwrap(), r);
    assert!(matches!(read_analytics(dir.path(), date("2018-03-15")), Err(ExtractError::NotFound(_))));
}

#[test]
fn date_mismatch_is_refused() {
    let err = extract_day(
        &staging("2018-03-14", StagedDay::default()),
        date("2018-03-15"),
        &ProfileDirectory::default(),
        &ExtractConfig::default(),
        &job_log(),
    )
    .unwrap_err();
    assert!(matches!(err, ExtractError::DateMismatch { .. }));
}

#[test]
fn percentile_nearest_rank_matches_definition() {
    let v: Vec<f64> = (1..=20).map(f64::from).collect();
    assert_eq!(percentile_nearest_rank(&v, 95.0), 19.0);
    assert_eq!(percentile_nearest_rank(&v, 100.0), 20.0);
    assert_eq!(percentile_nearest_rank(&v[..1], 95.0), 1.0);
    assert_eq!(percentile_nearest_rank(&[], 95.0), 0.0);
}

struct Farm {
    clock: Arc<ManualClock>,
    tracker: Tracker,
    log: Arc<LogStore>,
}

fn farm(start: &str) -> Farm {
    let clock = Arc::new(ManualClock::new(at(start)));
    let log = Arc::new(LogStore::in_memory(EngineTz::utc()));
    let tracker = Tracker::new(
        Arc::new(SessionStore::with_seed(SessionPolicy::default(), 9)),
        log.clone(),
        CaptureConfig::new(ReferrerConfig::with_bundled_tables("www.example.edu", &["example.edu"]), GeoTable::bundled()),
        clock.clone(),
    );
    Farm { clock, tracker, log }
}

fn hit(f: &Farm, user: u64) {
    let ctx = RequestContext {
        ip: "193.140.1.9".parse().unwrap(),
        user_agent: "Mozilla/5.0 (X11; Linux x86_64) Firefox/115.0".into(),
        referrer: String::new(),
        url: "https://www.example.edu/".into(),
        host: "www.example.edu".into(),
        service: "www".into(),
        server_id: 1,
        user: Some(AuthUser {
            user_id: user,
            username: format!("u{user}"),
        }),
        session_token: None,
        forwarded_for: None,
        accept_language: "en".into(),
        timestamp: f.clock.now(),
    };
    let h = f.tracker.begin_request(&ctx).unwrap();
    f.tracker.finalize_request(&h, AppData::default()).unwrap();
}

fn context<'a>(f: &'a Farm, dir: &'a Path, wh: &'a Warehouse, log: &'a JobLog, cfg: &'a ExtractConfig, profiles: &'a ProfileDirectory) -> NightlyContext<'a> {
    NightlyContext {
        tracker: Some(&f.tracker),
        log_store: &f.log,
        profiles,
        config: cfg,
        analytics_dir: dir,
        warehouse: wh,
        job_log: log,
        clock: f.clock.as_ref(),
    }
}

#[test]
fn nightly_writes_four_stage_lines_in_order() {
    let f = farm("2018-03-14T23:50:00Z");
    hit(&f, 1);
    f.clock.advance(Duration::minutes(15));
    hit(&f, 1);
    f.clock.advance(Duration::minutes(20));

    let dir = tempfile::tempdir().unwrap();
    let wh = Warehouse::in_memory();
    let log = JobLog::to_file(dir.path().join("nightly.log"), f.clock.clone());
    let (cfg, profiles) = (ExtractConfig::default(), ProfileDirectory::default());
    let analytics = dir.path().join("analytics");
    let ctx = context(&f, &analytics, &wh, &log, &cfg, &profiles);
    let report = run_nightly(&ctx, None, false).unwrap();
    assert!(report.succeeded(), "{report:?}");
    assert_eq!(report.date, date("2018-03-14"));
    let rec = report.record.as_ref().unwrap();
    assert_eq!((rec.sessions_total, rec.pageviews_total), (1, 2));
    assert_eq!(rec.logout_type_freq[LogoutType::WindowCloseTimeout.index()], 1);
    assert_eq!(wh.day(date("2018-03-14")).as_ref(), Some(rec));

    let text = std::fs::read_to_string(dir.path().join("nightly.log")).unwrap();
    let stages: Vec<&str> = text
        .lines()
        .map(|l| l.split('\t').collect::<Vec<_>>())
        .inspect(|cols| {
            assert_eq!(cols.len(), 3);
            assert!(DateTime::parse_from_rfc3339(cols[0]).is_ok(), "{}", cols[0]);
        })
        .map(|cols| cols[1])
        .filter(|s| Stage::ALL.iter().any(|st| st.as_str() == *s))
        .collect();
    assert_eq!(stages, vec!["maintenance", "sessions", "extract", "warehouse"]);
    assert_eq!(text.lines().count(), log.lines().len());
}

#[test]
fn failed_extract_skips_warehouse_and_resumes() {
    let f = farm("2018-03-14T10:00:00Z");
    hit(&f, 1);
    hit(&f, 2);
    f.clock.set(at("2018-03-15T02:00:00Z"));

    let dir = tempfile::tempdir().unwrap();
    let blocked = dir.path().join("analytics");
    std::fs::write(&blocked, b"not a directory").unwrap();
    let wh = Warehouse::in_memory();
    let log = job_log();
    let (cfg, profiles) = (ExtractConfig::default(), ProfileDirectory::default());
    let ctx = context(&f, &blocked, &wh, &log, &cfg, &profiles);
    let report = run_nightly(&ctx, None, false).unwrap();
    assert_eq!(report.failed_stage(), Some(Stage::Extract));
    assert!(matches!(report.outcome(Stage::Warehouse), Some(StageOutcome::Skipped(_))));
    assert_eq!(wh.day_count(), 0);
    let staged = f.log.staging(date("2018-03-14")).unwrap();

    std::fs::remove_file(&blocked).unwrap();
    let report = run_nightly(&ctx, None, false).unwrap();
    assert!(report.succeeded(), "{report:?}");
    assert_eq!(f.log.staging(date("2018-03-14")).unwrap(), staged);
    assert_eq!(f.log.staged_dates(), vec![date("2018-03-14")]);
    assert_eq!(wh.day(date("2018-03-14")).unwrap().sessions_total, 2);

    // a plain re-run keeps the stored file; --rerun rewrites identical bytes
    let path = blocked.join(analytics_file_name(date("2018-03-14")));
    let before = std::fs::read(&path).unwrap();
    let again = run_nightly(&ctx, None, false).unwrap();
    assert!(matches!(again.outcome(Stage::Extract), Some(StageOutcome::Skipped(_))));
    let forced = run_nightly(&ctx, None, true).unwrap();
    assert!(matches!(forced.outcome(Stage::Extract), Some(StageOutcome::Completed(_))));
    assert_eq!(std::fs::read(&path).unwrap(), before);
    assert_eq!(wh.day_count(), 1);
}

#[test]
fn rotating_today_fails_maintenance() {
    let f = farm("2018-03-14T10:00:00Z");
    hit(&f, 1);
    let dir = tempfile::tempdir().unwrap();
    let wh = Warehouse::in_memory();
    let log = job_log();
    let (cfg, profiles) = (ExtractConfig::default(), ProfileDirectory::default());
    let ctx = context(&f, dir.path(), &wh, &log, &cfg, &profiles);
    let report = run_nightly(&ctx, Some(date("2018-03-14")), false).unwrap();
    assert_eq!(report.failed_stage(), Some(Stage::Maintenance));
    assert_eq!(report.stages.len(), 4);
    assert_eq!(f.log.live_counts(date("2018-03-14")), (1, 1, 0));
}
