//! Acceptance criteria 1 through 9, one PASS/FAIL line each.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use cawal_core::clock::{Clock, EngineTz, ManualClock};
use cawal_core::extract::{extract_day, run_nightly, AnalyticsDay, JobLog, NightlyContext};
use cawal_core::logstore::{write_staged_day, LogStore, StagingHandle};
use cawal_core::model::OriginClass;
use cawal_core::session_store::LogoutType;
use cawal_core::sessionize::{reconstruct_sessions, SessionizerConfig};
use cawal_core::warehouse::Warehouse;
use cawal_farm::oracle::{check_all_traces, normalize, oracle_extract, oracle_sessions, worked_examples};
use cawal_farm::synth::{synth_day, synth_events, synth_events_for};
use cawal_farm::table3::{self, build_table3_day, ROWS};
use cawal_farm::{mode_configs, run_benchmark, run_simulation, LbPolicy, Mode, SimConfig};
use chrono::{TimeZone, Utc};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close_to(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol + 1e-9
}

fn quiet_log() -> JobLog {
    JobLog::in_memory(Arc::new(ManualClock::new(Utc.with_ymd_and_hms(2018, 3, 15, 2, 0, 0).unwrap())))
}

fn extract(handle: &StagingHandle, profiles: &cawal_core::model::ProfileDirectory, cfg: &cawal_core::extract::ExtractConfig) -> AnalyticsDay {
    extract_day(handle, handle.date(), profiles, cfg, &quiet_log()).expect("extraction")
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let fixture = build_table3_day();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let logs = dir.path().join("logs");
    write_staged_day(&logs, fixture.date, &fixture.day).map_err(|e| e.to_string())?;
    let store = LogStore::open(&logs, EngineTz::utc()).map_err(|e| e.to_string())?;
    let warehouse = Warehouse::open(dir.path().join("warehouse")).map_err(|e| e.to_string())?;
    let clock = ManualClock::new(Utc.with_ymd_and_hms(2018, 3, 15, 2, 0, 0).unwrap());
    let job_log = JobLog::in_memory(Arc::new(ManualClock::new(clock.now())));
    let analytics = dir.path().join("analytics");
    let ctx = NightlyContext {
        tracker: None,
        log_store: &store,
        profiles: &fixture.profiles,
        config: &fixture.config,
        analytics_dir: &analytics,
        warehouse: &warehouse,
        job_log: &job_log,
        clock: &clock,
    };
    let report = run_nightly(&ctx, Some(fixture.date), false).map_err(|e| e.to_string())?;
    ensure(report.succeeded(), || format!("nightly run failed: {:?}", report.stages))?;
    let r = report.record.ok_or("no record produced")?;
    let elapsed = started.elapsed();

    ensure(r.sessions_total == table3::TOTAL_SESSIONS, || format!("sessions {}", r.sessions_total))?;
    ensure(r.pageviews_total == table3::TOTAL_PAGEVIEWS, || format!("pageviews {}", r.pageviews_total))?;
    ensure(r.unique_users == table3::TOTAL_USERS, || format!("users {}", r.unique_users))?;
    for (name, got, want) in [
        ("PpS", r.pageviews_per_session, table3::TOTAL_PPS),
        ("PpU", r.pageviews_per_user, table3::TOTAL_PPU),
        ("SpU", r.sessions_per_user, table3::TOTAL_SPU),
    ] {
        ensure(close_to(got, want, 0.01), || format!("total {name} {got}, expected {want}"))?;
    }
    for row in ROWS {
        let o = r.origin(row.origin);
        let pps = match row.origin {
            OriginClass::InHouse => r.in_house_pps,
            OriginClass::InCountry => r.in_country_pps,
            OriginClass::OutCountry => r.out_country_pps,
        };
        ensure(
            o.users == row.users && o.sessions == row.sessions && o.pageviews == row.pageviews,
            || format!("{} counts {o:?}", row.origin),
        )?;
        ensure(close_to(pps, row.pps, 0.01), || format!("{} PpS {pps}, expected {}", row.origin, row.pps))?;
    }
    let series = warehouse
        .query_range("pageviews_per_session", fixture.date, fixture.date, None)
        .map_err(|e| e.to_string())?;
    ensure(series.total == Some(table3::TOTAL_PPS), || format!("warehouse PpS {:?}", series.total))?;
    ensure(elapsed.as_secs_f64() < 60.0, || format!("pipeline took {elapsed:?}"))?;
    Ok(format!(
        "PpS {} PpU {} SpU {}, origins exact, pipeline {:.2}s",
        r.pageviews_per_session,
        r.pageviews_per_user,
        r.sessions_per_user,
        elapsed.as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    for seed in 0..100 {
        let s = synth_day(seed, 1000);
        let handle = StagingHandle::from_records(s.date, s.day.clone());
        let got = extract(&handle, &s.profiles, &s.config);
        let want = oracle_extract(&s.day, s.date, &s.profiles, &s.config);
        if got.to_canonical_json() != want.to_canonical_json() {
            let a = serde_json::to_value(&got).unwrap();
            let b = serde_json::to_value(&want).unwrap();
            let diff: Vec<&String> = a
                .as_object()
                .unwrap()
                .iter()
                .filter(|(k, v)| b.get(k.as_str()) != Some(v))
                .map(|(k, _)| k)
                .collect();
            return Err(format!("seed {seed}: fields differ: {diff:?}"));
        }
        let v = got.invariant_violations();
        ensure(v.is_empty(), || format!("seed {seed}: {v:?}"))?;
    }
    Ok("100 synthetic days match the brute-force oracle".into())
}

fn criterion_3() -> Outcome {
    let mut crossing = 0usize;
    for seed in 0..20 {
        let mut cfg = SimConfig::homogeneous(300, seed);
        cfg.mode = Mode::ServerSide;
        cfg.hour_profile = vec![0.0; 24];
        cfg.hour_profile[23] = 1.0;
        cfg.think_time_dist = cawal_farm::DistSpec::Exponential { mean: 300.0 };
        let out = run_simulation(&cfg).map_err(|e| e.to_string())?;
        let tz = EngineTz::utc();
        let mut extracted = 0;
        let mut sessions = 0;
        for (date, day) in &out.staged {
            let starts: HashMap<&str, chrono::NaiveDate> =
                day.sessions.iter().map(|s| (s.session_id.as_str(), tz.date_of(s.datetime))).collect();
            for p in &day.pageviews {
                let start = starts.get(p.session_id.as_str());
                ensure(start == Some(date), || format!("seed {seed}: pageview of {} filed under {date}", p.session_id))?;
                if tz.date_of(p.datetime) != *date {
                    crossing += 1;
                }
            }
            let r = extract(&StagingHandle::from_records(*date, day.clone()), &out.profiles, &out.extract_config);
            extracted += r.pageviews_total;
            sessions += r.sessions_total;
        }
        ensure(extracted == out.report.totals.pageviews, || {
            format!("seed {seed}: extracted {extracted} of {} pageviews", out.report.totals.pageviews)
        })?;
        ensure(sessions == out.report.totals.sessions, || format!("seed {seed}: {sessions} sessions"))?;
    }
    ensure(crossing > 0, || "no pageview crossed midnight".into())?;
    Ok(format!("{crossing} after-midnight pageviews stayed with their start day"))
}

fn criterion_4() -> Outcome {
    let mut lines = Vec::new();
    for seed in 0..10 {
        let base = SimConfig::homogeneous(400, seed);
        let report = run_benchmark(&mode_configs(&base, &Mode::ALL), 3).map_err(|e| e.to_string())?;
        for m in &report.modes {
            let want = m.mode.log_requests_per_pageview();
            ensure(m.requests_to_log_sink == want * m.pageviews, || {
                format!("seed {seed}: {} sent {} log requests for {} pageviews", m.mode.as_str(), m.requests_to_log_sink, m.pageviews)
            })?;
        }
        ensure(report.ordering_holds(), || {
            let t: Vec<String> = report.modes.iter().map(|m| format!("{}={:.0}", m.mode.as_str(), m.throughput_rps)).collect();
            format!("seed {seed}: throughput ordering violated: {}", t.join(" "))
        })?;
        if seed == 0 {
            lines = report.modes.iter().map(|m| format!("{} {:.0} req/s", m.mode.as_str(), m.throughput_rps)).collect();
        }
    }
    Ok(format!("0/1/3 log requests per pageview, ordering held on 10 seeds ({})", lines.join(", ")))
}

fn criterion_5() -> Outcome {
    let (mut lo, mut hi, mut worst_pps) = (f64::MAX, f64::MIN, 0.0f64);
    for seed in 0..10 {
        let mut cfg = SimConfig::homogeneous(50_000, seed);
        cfg.lb_policy = LbPolicy::Random;
        let out = run_simulation(&cfg).map_err(|e| e.to_string())?;
        let totals = out.report.totals;
        let global_pps = totals.pageviews as f64 / totals.sessions as f64;
        ensure(out.report.per_server.len() == 7, || format!("seed {seed}: {} servers", out.report.per_server.len()))?;
        for (id, s) in &out.report.per_server {
            let share = 100.0 * s.sessions as f64 / totals.sessions as f64;
            let pps = s.pageviews as f64 / s.sessions as f64;
            let dev = (pps - global_pps).abs() / global_pps;
            lo = lo.min(share);
            hi = hi.max(share);
            worst_pps = worst_pps.max(dev);
            ensure((13.3..=15.3).contains(&share), || format!("seed {seed}: server {id} share {share:.2}%"))?;
            ensure(dev <= 0.05, || format!("seed {seed}: server {id} PpS {pps:.3} vs {global_pps:.3}"))?;
        }
    }
    Ok(format!("shares {lo:.2}%..{hi:.2}%, worst PpS deviation {:.2}%", worst_pps * 100.0))
}

fn criterion_6() -> Outcome {
    let report = check_all_traces(6);
    ensure(report.failures.is_empty(), || format!("{} failures, first: {}", report.failures.len(), report.failures[0]))?;
    for (name, ok) in worked_examples() {
        ensure(ok, || format!("example failed: {name}"))?;
    }
    Ok(format!("{} traces ({} steps) agree with the model; worked examples hold", report.traces, report.steps))
}

fn criterion_7() -> Outcome {
    for seed in 0..5 {
        let mut cfg = SimConfig::homogeneous(500, seed);
        cfg.mode = Mode::ServerSide;
        cfg.hour_profile[23] = 6.0;
        let a = run_simulation(&cfg).map_err(|e| e.to_string())?;
        let b = run_simulation(&cfg).map_err(|e| e.to_string())?;
        ensure(a.log_bytes() == b.log_bytes(), || format!("seed {seed}: log bytes differ between runs"))?;
        ensure(a.report.to_json() == b.report.to_json(), || format!("seed {seed}: reports differ"))?;

        let sessions: usize = a.staged.values().map(|d| d.sessions.len()).sum();
        let pageviews: usize = a.staged.values().map(|d| d.pageviews.len()).sum();
        ensure(sessions as u64 == a.report.totals.sessions, || format!("seed {seed}: {sessions} session rows"))?;
        ensure(pageviews as u64 == a.report.totals.pageviews, || format!("seed {seed}: {pageviews} pageview rows"))?;
        for day in a.staged.values() {
            let mut closes: HashMap<&str, usize> = HashMap::new();
            for c in &day.closes {
                *closes.entry(c.session_id.as_str()).or_default() += 1;
            }
            for s in &day.sessions {
                ensure(closes.get(s.session_id.as_str()) == Some(&1), || {
                    format!("seed {seed}: session {} has {:?} close rows", s.session_id, closes.get(s.session_id.as_str()))
                })?;
            }
        }
        let explicit = a
            .staged
            .values()
            .flat_map(|d| &d.closes)
            .filter(|c| c.logout_type == LogoutType::Explicit)
            .count();
        ensure(explicit > 0, || format!("seed {seed}: no explicit logouts recorded"))?;

        for (date, day) in &a.staged {
            let h = StagingHandle::from_records(*date, day.clone());
            let x = extract(&h, &a.profiles, &a.extract_config).to_canonical_json();
            let y = extract(&h, &a.profiles, &a.extract_config).to_canonical_json();
            ensure(x == y, || format!("seed {seed}: extraction of {date} not byte-identical"))?;
        }
    }
    Ok("rotation conserves rows, simulation and extraction are byte-deterministic".into())
}

fn time_sessionizer(n: usize, repeats: usize) -> f64 {
    let events = synth_events_for(42, n, n / 10);
    let cfg = SessionizerConfig::default();
    (0..repeats)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(reconstruct_sessions(&events, &cfg));
            t.elapsed().as_secs_f64()
        })
        .fold(f64::MAX, f64::min)
}

fn criterion_8() -> Outcome {
    let cfg = SessionizerConfig::default();
    for seed in 0..100u64 {
        let n = 1 + (seed as usize * 37) % 500;
        let events = synth_events(seed, n);
        let got = normalize(&reconstruct_sessions(&events, &cfg));
        let want = oracle_sessions(&events, cfg.timeout);
        ensure(got == want, || format!("seed {seed} (n={n}): {} sessions vs oracle {}", got.len(), want.len()))?;
    }
    let small = time_sessionizer(100_000, 5);
    let large = time_sessionizer(200_000, 5);
    let ratio = large / small;
    ensure(ratio <= 2.5, || format!("doubling 1e5 -> 2e5 events took {ratio:.2}x"))?;
    Ok(format!("100 inputs match the quadratic oracle; doubling ratio {ratio:.2}"))
}

fn criterion_9() -> Outcome {
    let mut cfg = SimConfig::homogeneous(2000, 9);
    cfg.mode = Mode::ServerSide;
    let out = run_simulation(&cfg).map_err(|e| e.to_string())?;
    let mut sizes: Vec<usize> = out.session_records().map(|s| serde_json::to_vec(s).unwrap().len()).collect();
    ensure(!sizes.is_empty(), || "no session records".into())?;
    sizes.sort_unstable();
    let median = sizes[sizes.len() / 2];
    ensure(median <= 600, || format!("median session record {median} bytes"))?;

    let fixture = build_table3_day();
    let r = extract(&StagingHandle::from_records(fixture.date, fixture.day), &fixture.profiles, &fixture.config);
    let size = r.to_canonical_json().len();
    ensure(size <= 128 * 1024, || format!("analytics day {size} bytes"))?;
    Ok(format!("median session record {median} B, analytics day {size} B"))
}

fn main() -> ExitCode {
    let criteria: [(u32, fn() -> Outcome); 9] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
    ];
    let mut failed = BTreeMap::new();
    for (n, f) in criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS ({secs:.1}s) {detail}"),
            Err(detail) => {
                println!("criterion {n}: FAIL ({secs:.1}s) {detail}");
                failed.insert(n, detail);
            }
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
