use cawal_core::extract::{ratio, AnalyticsDay, ServerStats};
use cawal_core::warehouse::{metric_names, GroupBy, Warehouse};
use chrono::{Duration, NaiveDate};
use proptest::prelude::*;

fn record(date: NaiveDate, sessions: u64, pageviews: u64, users: u64) -> AnalyticsDay {
    let mut r = AnalyticsDay::empty(date);
    r.sessions_total = sessions;
    r.pageviews_total = pageviews;
    r.unique_users = users;
    r.guest_sessions = sessions / 3;
    r.authenticated_sessions = sessions - sessions / 3;
    r.pageviews_per_session = ratio(pageviews, sessions);
    r.pageviews_per_user = ratio(pageviews, users);
    r.sessions_per_user = ratio(sessions, users);
    r.referrer_type_freq[0] = sessions;
    r.per_server.insert(1, ServerStats { sessions, pageviews, unique_users: users });
    r
}

#[test]
fn a_year_of_days_fills_twelve_marts() {
    let dir = tempfile::tempdir().unwrap();
    let wh = Warehouse::open(dir.path()).unwrap();
    let start: NaiveDate = "2018-01-01".parse().unwrap();
    for i in 0..365 {
        wh.load_day(record(start + Duration::days(i), 1, 2, 1), false).unwrap();
    }
    let marts = wh.marts();
    assert_eq!(marts.len(), 12);
    assert_eq!(marts.iter().map(|m| m.days).sum::<usize>(), 365);
    assert_eq!(marts.iter().filter(|m| m.sealed).count(), 11);

    let reopened = Warehouse::open(dir.path()).unwrap();
    assert_eq!(reopened.marts(), marts);
    let year = reopened
        .query_range("sessions_total", start, start + Duration::days(364), None)
        .unwrap();
    assert_eq!(year.total, Some(365.0));
    assert!(year.points.iter().all(|p| p.value == Some(1.0)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn range_totals_resum_loaded_counts(
        days in prop::collection::vec((1u64..500, 1u64..20, 1u64..300, any::<bool>()), 1..40),
        offset in 0i64..400,
    ) {
        let wh = Warehouse::in_memory();
        let start = NaiveDate::from_ymd_opt(2018, 1, 1).unwrap() + Duration::days(offset);
        let (mut s, mut p, mut u) = (0, 0, 0);
        for (i, (sessions, pps, users, loaded)) in days.iter().enumerate() {
            if !loaded {
                continue;
            }
            let pageviews = sessions * pps;
            wh.load_day(record(start + Duration::days(i as i64), *sessions, pageviews, *users), true).unwrap();
            s += sessions;
            p += pageviews;
            u += users;
        }
        let end = start + Duration::days(days.len() as i64 - 1);
        let any_loaded = days.iter().any(|d| d.3);
        let total = |m: &str| wh.query_range(m, start, end, None).unwrap().total;
        if any_loaded {
            prop_assert_eq!(total("sessions_total"), Some(s as f64));
            prop_assert_eq!(total("pageviews_total"), Some(p as f64));
            prop_assert_eq!(total("pageviews_per_session"), Some(ratio(p, s)));
            prop_assert_eq!(total("pageviews_per_user"), Some(ratio(p, u)));
            let g = wh.query_range("pageviews_per_session", start, end, Some(GroupBy::Server)).unwrap();
            prop_assert_eq!(g.groups[0].total, Some(ratio(p, s)));
        } else {
            prop_assert_eq!(total("sessions_total"), None);
        }
        let series = wh.query_range("sessions_total", start, end, None).unwrap();
        for (point, d) in series.points.iter().zip(&days) {
            prop_assert_eq!(point.value.is_some(), d.3);
        }
        for m in metric_names() {
            prop_assert!(wh.query_range(m, start, end, None).is_ok());
        }
    }
}
